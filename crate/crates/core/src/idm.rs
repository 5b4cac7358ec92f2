//! Information distortion mitigation: pulls the standardized, affinely
//! adapted and rectified outputs of a low-bit layer toward those of the
//! max-bit reference.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::supernet::{BitSpace, FreezeMask, Policy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmConfig {
    pub enabled: bool,
    /// Loss coefficient. The default puts the alignment term at roughly a
    /// tenth of the initial task loss of the reference CNN on MNIST.
    pub beta: f64,
    /// Rectification threshold.
    pub q: f64,
    pub eps_stab: f64,
}

impl Default for IdmConfig {
    fn default() -> Self {
        IdmConfig {
            enabled: true,
            beta: 2.5,
            q: 0.0,
            eps_stab: 1e-5,
        }
    }
}

impl IdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_stab > 0.0) || !self.beta.is_finite() || self.beta < 0.0 || !self.q.is_finite() {
            return Err(Error::Config("idm needs eps_stab > 0, finite beta >= 0 and finite q".into()));
        }
        Ok(())
    }
}

/// Tape handles of one layer's head: gain and shift for each branch.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub eta_s: Var,
    pub xi_s: Var,
    pub eta_h: Var,
    pub xi_h: Var,
}

/// Per-channel `(x - mean) / sqrt(var + eps)` over batch and spatial axes.
pub fn standardize<T: Element>(x: &Tensor<T>, eps_stab: f64) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let s = standardize_on_tape(&mut tape, v, eps_stab)?;
    Ok(tape.value(s).clone())
}

pub fn standardize_on_tape<T: Element>(tape: &mut Tape<T>, x: Var, eps_stab: f64) -> Result<Var> {
    let mean = tape.channel_mean(x)?;
    let var = tape.channel_var(x)?;
    let centered = tape.sub_channel(x, mean)?;
    let shifted = tape.add_scalar(var, T::from_f64(eps_stab));
    let std = tape.sqrt(shifted)?;
    tape.div_channel(centered, std)
}

/// `max(q, standardize(o) * eta + xi)` per channel.
fn branch<T: Element>(tape: &mut Tape<T>, o: Var, eta: Var, xi: Var, cfg: &IdmConfig) -> Result<Var> {
    let s = standardize_on_tape(tape, o, cfg.eps_stab)?;
    let a = tape.mul_channel(s, eta)?;
    let b = tape.add_channel(a, xi)?;
    Ok(tape.max_scalar(b, T::from_f64(cfg.q)))
}

/// Mean absolute difference between the rectified adapted branches.
/// `o_h` should be a constant on the tape so the target stays detached.
pub fn idm_loss<T: Element>(tape: &mut Tape<T>, o_s: Var, o_h: Var, head: &HeadVars, cfg: &IdmConfig) -> Result<Var> {
    if tape.shape(o_s) != tape.shape(o_h) {
        return Err(Error::shape(
            "idm_loss",
            format!("student {:?}, reference {:?}", tape.shape(o_s), tape.shape(o_h)),
        ));
    }
    let s = branch(tape, o_s, head.eta_s, head.xi_s, cfg)?;
    let h = branch(tape, o_h, head.eta_h, head.xi_h, cfg)?;
    let d = tape.sub(s, h)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Whether a layer's output is aligned under `policy`: the sampled weight bit
/// must be the layer's smallest unfrozen candidate. Fixed layers never are.
pub fn idm_site_selection(space: &BitSpace, mask: &FreezeMask, policy: &Policy, layer: usize) -> bool {
    let l = &space.layers[layer];
    !l.fixed && Some(policy.layer(layer).w) == mask.smallest_unfrozen(space, layer)
}
