//! Checkpoint files: one JSON header line followed by a raw little-endian
//! `f32` payload. The header lists every tensor with its offset and carries
//! a CRC-32 of the payload plus the counters and RNG state needed to resume
//! training exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{CheckpointError, Error, Result};
use crate::supernet::{FreezeMask, RngState, Supernet, Trainer};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub topology_hash: String,
    pub step: u64,
    pub optimizer_steps: u64,
    pub rng: Option<RngState>,
    pub freeze: FreezeMask,
    pub tensors: Vec<TensorEntry>,
    pub payload_len: usize,
    pub checksum: u32,
    /// Free-form run description (usually the resolved config).
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor<f32>>,
}

fn model_tensors(model: &Supernet) -> Vec<(String, Tensor<f32>)> {
    let mut out: Vec<(String, Tensor<f32>)> = model
        .param_info()
        .iter()
        .zip(model.params())
        .map(|(i, p)| (i.name.clone(), p.clone()))
        .collect();
    for (l, r) in model.running_stats().iter().enumerate() {
        if let Some(r) = r {
            let n = r.mean.len();
            out.push((format!("l{l}.bn.running_mean"), Tensor::from_parts(vec![n], r.mean.clone())));
            out.push((format!("l{l}.bn.running_var"), Tensor::from_parts(vec![n], r.var.clone())));
        }
    }
    out
}

impl Checkpoint {
    fn build(model: &Supernet, named: Vec<(String, Tensor<f32>)>, step: u64, opt_steps: u64, rng: Option<RngState>, freeze: FreezeMask, meta: serde_json::Value) -> Self {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (name, t) in named {
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
            tensors.push(t);
        }
        let mut c = Checkpoint {
            header: Header {
                version: FORMAT_VERSION,
                topology_hash: model.topology_hash(),
                step,
                optimizer_steps: opt_steps,
                rng,
                freeze,
                tensors: entries,
                payload_len: offset * 4,
                checksum: 0,
                meta,
            },
            tensors,
        };
        c.header.checksum = crc32fast::hash(&c.payload());
        c
    }

    /// Model parameters and batch-norm statistics only.
    pub fn from_model(model: &Supernet, meta: serde_json::Value) -> Self {
        Self::build(model, model_tensors(model), 0, 0, None, FreezeMask::new(), meta)
    }

    /// Everything needed to continue training exactly where `trainer` is.
    pub fn from_trainer(trainer: &Trainer, meta: serde_json::Value) -> Self {
        let mut named = model_tensors(&trainer.model);
        for (info, buf) in trainer.model.param_info().iter().zip(trainer.optimizer.buffers()) {
            named.push((format!("opt.{}", info.name), buf.clone()));
        }
        Self::build(
            &trainer.model,
            named,
            trainer.step(),
            trainer.optimizer.steps(),
            Some(trainer.sampler.rng_state()),
            trainer.mask.clone(),
            meta,
        )
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header.payload_len);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        out.extend_from_slice(&self.payload());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Corrupt("missing header line".into()))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                expected: FORMAT_VERSION,
                found,
            }
            .into());
        }
        let header: Header =
            serde_json::from_value(value).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let payload = &bytes[nl + 1..];
        if payload.len() != header.payload_len {
            return Err(CheckpointError::Corrupt(format!(
                "payload is {} bytes, header says {}",
                payload.len(),
                header.payload_len
            ))
            .into());
        }
        if crc32fast::hash(payload) != header.checksum {
            return Err(CheckpointError::Corrupt("checksum mismatch".into()).into());
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let slice = floats
                .get(e.offset..e.offset + n)
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {} out of bounds", e.name)))?;
            tensors.push(Tensor::new(e.shape.clone(), slice.to_vec())?);
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()).into())
    }

    fn check_hash(&self, model: &Supernet) -> Result<()> {
        let expected = model.topology_hash();
        if self.header.topology_hash != expected {
            return Err(CheckpointError::TopologyMismatch {
                expected,
                found: self.header.topology_hash.clone(),
            }
            .into());
        }
        Ok(())
    }

    fn fetch(&self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let t = self.tensor(name)?;
        if t.shape() != shape {
            return Err(CheckpointError::Corrupt(format!("tensor {name} has shape {:?}", t.shape())).into());
        }
        Ok(t.clone())
    }

    /// Loads parameters and batch-norm statistics into `model`.
    pub fn restore_model(&self, model: &mut Supernet) -> Result<()> {
        self.check_hash(model)?;
        let names: Vec<String> = model.param_info().iter().map(|i| i.name.clone()).collect();
        let loaded = names
            .iter()
            .zip(model.params())
            .map(|(n, p)| self.fetch(n, p.shape()))
            .collect::<Result<Vec<_>>>()?;
        model.params_mut().clone_from_slice(&loaded);
        for (l, r) in model.running_stats_mut().iter_mut().enumerate() {
            if let Some(r) = r {
                let n = r.mean.len();
                r.mean = self.fetch(&format!("l{l}.bn.running_mean"), &[n])?.into_data();
                r.var = self.fetch(&format!("l{l}.bn.running_var"), &[n])?.into_data();
            }
        }
        Ok(())
    }

    /// Restores model, optimizer, sampler, freeze mask and step counter.
    pub fn restore_trainer(&self, trainer: &mut Trainer) -> Result<()> {
        self.restore_model(&mut trainer.model)?;
        let buffers = trainer
            .model
            .param_info()
            .iter()
            .zip(trainer.model.params())
            .map(|(i, p)| self.fetch(&format!("opt.{}", i.name), p.shape()))
            .collect::<Result<Vec<_>>>()?;
        trainer.optimizer.restore(buffers, self.header.optimizer_steps)?;
        let rng = self
            .header
            .rng
            .as_ref()
            .ok_or_else(|| CheckpointError::MissingTensor("sampler rng state".into()))?;
        trainer.sampler.set_rng_state(rng);
        trainer.mask = self.header.freeze.clone();
        trainer.set_step(self.header.step);
        Ok(())
    }
}
