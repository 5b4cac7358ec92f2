use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::tensor::{Element, Tensor};

/// SGD with heavy-ball momentum and coupled weight decay.
///
/// Per parameter: `v <- m*v + g + wd*mult*p`, then `p <- p - lr*v`, where
/// `mult` is the caller-supplied decay multiplier for that parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T: Element = f32> {
    pub momentum: T,
    pub weight_decay: T,
    buffers: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Element> Sgd<T> {
    pub fn new<'a>(momentum: T, weight_decay: T, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: shapes.into_iter().map(Tensor::zeros).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    /// Restores momentum buffers and the step counter, e.g. from a checkpoint.
    pub fn restore(&mut self, buffers: Vec<Tensor<T>>, steps: u64) -> Result<()> {
        if buffers.len() != self.buffers.len()
            || buffers.iter().zip(&self.buffers).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("sgd restore", "momentum buffers do not match parameters"));
        }
        self.buffers = buffers;
        self.steps = steps;
        Ok(())
    }

    pub fn step(
        &mut self,
        lr: T,
        params: &mut [Tensor<T>],
        grads: &[Option<Tensor<T>>],
        decay_mult: &[T],
    ) -> Result<()> {
        if params.len() != self.buffers.len() || decay_mult.len() != params.len() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "{} params, {} buffers, {} decay multipliers",
                    params.len(),
                    self.buffers.len(),
                    decay_mult.len()
                ),
            ));
        }
        if grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "sgd_step: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, ((p, buf), g)) in params.iter_mut().zip(&mut self.buffers).zip(grads).enumerate() {
            let g = g
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("sgd_step: missing gradient for parameter {i}")))?;
            if g.shape() != p.shape() || buf.shape() != p.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
            let wd = self.weight_decay * decay_mult[i];
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(buf.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv + wd * *pv;
                *pv = *pv - lr * *vv;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Linear warm-up to `base_lr`, then half-cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, warmup_steps: u64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("cosine_lr: total_steps must be positive"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!(
            "cosine_lr: step {step} beyond total {total_steps}"
        )));
    }
    let warmup = warmup_steps.min(total_steps);
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    let span = total_steps - warmup;
    if span == 0 {
        return Ok(base_lr);
    }
    let progress = (step - warmup) as f64 / span as f64;
    Ok(base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}
