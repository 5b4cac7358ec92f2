//! Uniform fake quantizers with learnable step sizes, and the discrete level
//! sets they map onto.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{fake_quant, fake_quant_scale_grad};
use crate::autodiff::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Smallest bit-width any quantizer accepts.
pub const MIN_BITS: u8 = 2;
/// Largest bit-width any quantizer accepts.
pub const MAX_BITS: u8 = 16;

/// Lower bound on initialized step sizes.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantKind {
    /// Signed, `[-2^(b-1), 2^(b-1) - 1]`.
    Weight,
    /// Unsigned, `[0, 2^b - 1]`; inputs are assumed rectified.
    Activation,
}

impl QuantKind {
    pub fn bounds(self, bits: u8) -> (i32, i32) {
        match self {
            QuantKind::Weight => (-(1i32 << (bits - 1)), (1i32 << (bits - 1)) - 1),
            QuantKind::Activation => (0, (1i32 << bits) - 1),
        }
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::invalid(format!(
            "bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("quantizer scale must be positive, got {scale}")));
    }
    Ok(())
}

/// Bit-width, kind and step size of one quantizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantSpec {
    pub bits: u8,
    pub kind: QuantKind,
    pub scale: f64,
}

impl QuantSpec {
    pub fn new(bits: u8, kind: QuantKind, scale: f64) -> Result<Self> {
        check_bits(bits)?;
        check_scale(scale)?;
        Ok(QuantSpec { bits, kind, scale })
    }

    pub fn weight(bits: u8, scale: f64) -> Result<Self> {
        Self::new(bits, QuantKind::Weight, scale)
    }

    pub fn activation(bits: u8, scale: f64) -> Result<Self> {
        Self::new(bits, QuantKind::Activation, scale)
    }

    pub fn n_min(&self) -> i32 {
        self.kind.bounds(self.bits).0
    }

    pub fn n_max(&self) -> i32 {
        self.kind.bounds(self.bits).1
    }

    /// Quantizes one value.
    pub fn apply(&self, x: f64) -> f64 {
        fake_quant(x, self.scale, self.n_min() as f64, self.n_max() as f64)
    }

    /// Level set this quantizer maps onto.
    pub fn levels(&self) -> Brs {
        let (lo, hi) = (self.n_min(), self.n_max());
        Brs {
            bits: self.bits,
            scale: self.scale,
            levels: (lo..=hi).map(|k| k as f64 * self.scale).collect(),
        }
    }
}

/// Quantizes a tensor outside any tape.
pub fn quantize<T: Element>(x: &Tensor<T>, spec: &QuantSpec) -> Tensor<T> {
    let s = T::from_f64(spec.scale);
    let (lo, hi) = (T::from_f64(spec.n_min() as f64), T::from_f64(spec.n_max() as f64));
    x.map(|v| fake_quant(v, s, lo, hi))
}

/// Records a fake-quantization of `x` with step-size leaf `scale` on the tape.
pub fn quantize_on_tape<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    scale: Var,
    bits: u8,
    kind: QuantKind,
) -> Result<Var> {
    check_bits(bits)?;
    let (lo, hi) = kind.bounds(bits);
    tape.quantize(x, scale, lo, hi)
}

/// Gradient-scale factor `1 / sqrt(numel * n_max)` applied to the step-size
/// gradient.
pub fn scale_grad_factor(numel: usize, spec: &QuantSpec) -> f64 {
    1.0 / ((numel as f64) * spec.n_max() as f64).sqrt()
}

/// Straight-through backward of [`quantize`]: returns the input gradient and
/// the (gradient-scaled) step-size gradient.
pub fn quantize_backward<T: Element>(upstream: &Tensor<T>, x: &Tensor<T>, spec: &QuantSpec) -> Result<(Tensor<T>, f64)> {
    if upstream.shape() != x.shape() {
        return Err(Error::shape(
            "quantize_backward",
            format!("upstream {:?}, x {:?}", upstream.shape(), x.shape()),
        ));
    }
    let s = T::from_f64(spec.scale);
    let (lo, hi) = (T::from_f64(spec.n_min() as f64), T::from_f64(spec.n_max() as f64));
    let mut gx = Vec::with_capacity(x.numel());
    let mut gs = 0.0f64;
    for (&u, &v) in upstream.data().iter().zip(x.data()) {
        let z = v / s;
        gx.push(if z >= lo && z <= hi { u } else { T::zero() });
        gs += u.as_f64() * fake_quant_scale_grad(v, s, lo, hi).as_f64();
    }
    let gs = gs * scale_grad_factor(x.numel(), spec);
    Ok((Tensor::new(x.shape().to_vec(), gx)?, gs))
}

/// Step-size initialization `2 * mean(|w|) / sqrt(n_max)`, floored at
/// [`SCALE_FLOOR`].
pub fn init_scale<T: Element>(w: &Tensor<T>, bits: u8, kind: QuantKind) -> Result<f64> {
    check_bits(bits)?;
    if w.numel() == 0 {
        return Err(Error::invalid("init_scale: empty tensor"));
    }
    let mean_abs = w.data().iter().map(|v| v.as_f64().abs()).sum::<f64>() / w.numel() as f64;
    let n_max = kind.bounds(bits).1 as f64;
    Ok((2.0 * mean_abs / n_max.sqrt()).max(SCALE_FLOOR))
}

/// Bit-width representation set: the `2^b` signed levels
/// `scale * {-2^(b-1), ..., 2^(b-1) - 1}` in ascending order.
#[derive(Clone, Debug, PartialEq)]
pub struct Brs {
    pub bits: u8,
    pub scale: f64,
    pub levels: Vec<f64>,
}

impl Brs {
    pub fn new(bits: u8, scale: f64) -> Result<Self> {
        Ok(QuantSpec::weight(bits, scale)?.levels())
    }

    /// Quantization bounds: midpoints between adjacent levels.
    pub fn bounds(&self) -> impl Iterator<Item = f64> + '_ {
        self.levels.windows(2).map(|p| 0.5 * (p[0] + p[1]))
    }

    pub fn contains(&self, v: f64) -> bool {
        self.levels.contains(&v)
    }

    /// Index of the nearest level; exact ties go to the lower level.
    pub fn nearest_index(&self, w: f64) -> usize {
        let last = self.levels.len() - 1;
        let z = ((w - self.levels[0]) / self.scale).floor();
        let lo = if z <= 0.0 { 0 } else { (z as usize).min(last) };
        let hi = (lo + 1).min(last);
        let (dl, dh) = ((w - self.levels[lo]).abs(), (w - self.levels[hi]).abs());
        if dh < dl {
            hi
        } else {
            lo
        }
    }
}

/// Shorthand for [`Brs::new`].
pub fn brs(bits: u8, scale: f64) -> Result<Brs> {
    Brs::new(bits, scale)
}

/// Nearest level of `w` in `brs` and the absolute distance to it.
pub fn distance_to_level(w: f64, brs: &Brs) -> (f64, f64) {
    let level = brs.levels[brs.nearest_index(w)];
    (level, (w - level).abs())
}
