//! Reverse-mode automatic differentiation over dense tensors.

pub(crate) mod kernels;
mod optim;
mod tape;
mod tensor;

pub use optim::{cosine_lr, Sgd};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::{Element, Tensor};
