//! One-shot weight-sharing mixed-precision quantization.
//!
//! A supernet keeps one latent weight tensor per layer and trains every
//! bit-width in a candidate set at once by sampling per-layer bit policies.
//! Low bit-widths disturb the shared weights, so training freezes the
//! lowest bit of the most unstable layers on a cosine schedule and aligns
//! low-bit layer outputs with the max-bit ones. After training, a
//! bidirectional greedy search picks per-layer bit-widths under a BitOps
//! budget using inference only.
//!
//! Module map:
//!
//! - [`autodiff`]: tape-based reverse mode, SGD, cosine schedule
//! - [`quant`]: fake quantizers, bit-width representation sets
//! - [`supernet`]: topology, policies, sampling, training loop
//! - [`scheduler`]: unstable-weight criterion and Top-K bit freezing
//! - [`idm`]: feature-alignment loss between low- and max-bit outputs
//! - [`search`]: BitOps model and greedy policy search
//! - [`analysis`]: diagnostic probes (toy regression, traces, densities)
//! - [`data`], [`checkpoint`], [`config`], [`commands`]: I/O and drivers

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
mod error;
pub mod idm;
pub mod quant;
pub mod scheduler;
pub mod search;
pub mod supernet;

pub use error::{CheckpointError, Error, IdxError, Result};
