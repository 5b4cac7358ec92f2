//! Diagnostic probes for bit-width interference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::idm::standardize;
use crate::quant::{Brs, QuantKind, QuantSpec};
use crate::supernet::{BitPair, BnMode, ParamRole, Policy, Supernet};

/// How step sizes of the non-reference bits are derived in the toy regression.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    /// One step size for every bit-width.
    Shared,
    /// `scale_b = scale_ref * sqrt(n_max(ref) / n_max(b))`, the ratio the
    /// step-size initializer produces for a fixed weight distribution.
    #[default]
    LsqRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Regress2dConfig {
    /// Bit-widths sampled uniformly, one per step.
    pub bits: Vec<u8>,
    /// Bit-width whose grid the target sits on and whose trajectory is scored.
    pub reference_bits: u8,
    pub reference_scale: f64,
    pub scale_rule: ScaleRule,
    /// Target weight; drawn from `target_pool` when unset.
    pub w_star: Option<f64>,
    /// Bit-widths constraining the drawn target: on the reference grid, off
    /// every other grid in the pool, inside every clip range of the pool.
    pub target_pool: Vec<u8>,
    pub w0: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for Regress2dConfig {
    fn default() -> Self {
        Regress2dConfig {
            bits: vec![2, 4],
            reference_bits: 4,
            reference_scale: 0.125,
            scale_rule: ScaleRule::LsqRatio,
            w_star: None,
            target_pool: vec![2, 4],
            w0: 0.0,
            lr: 0.2,
            batch: 64,
            steps: 2000,
            seed: 0,
        }
    }
}

impl Regress2dConfig {
    pub fn scale_for(&self, bits: u8) -> f64 {
        match self.scale_rule {
            ScaleRule::Shared => self.reference_scale,
            ScaleRule::LsqRatio => {
                let n = |b: u8| QuantKind::Weight.bounds(b).1 as f64;
                self.reference_scale * (n(self.reference_bits) / n(bits)).sqrt()
            }
        }
    }

    /// Draws a target satisfying the `target_pool` constraints.
    pub fn draw_target<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let g = self.reference_scale;
        let (lo_ref, hi_ref) = QuantKind::Weight.bounds(self.reference_bits);
        let ok = |k: i32| -> bool {
            let w = k as f64 * g;
            k != 0
                && self.target_pool.iter().all(|&b| {
                    let s = self.scale_for(b);
                    let (lo, hi) = QuantKind::Weight.bounds(b);
                    let inside = w >= lo as f64 * s - 1e-12 && w <= hi as f64 * s + 1e-12;
                    let on_grid = ((w / s) - (w / s).round()).abs() < 1e-9;
                    inside && (b == self.reference_bits || !on_grid)
                })
        };
        let options: Vec<i32> = (lo_ref..=hi_ref).filter(|&k| ok(k)).collect();
        if options.is_empty() {
            return Err(Error::Config("no target satisfies the target_pool constraints".into()));
        }
        Ok(options[rng.random_range(0..options.len())] as f64 * g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionRecord {
    pub step: usize,
    pub latent: f64,
    /// Quantized weight per bit, in the order of [`RegressionRun::bits`].
    pub quantized: Vec<f64>,
    /// `|dL/dw| / mean(x^2)` per bit on this step's batch.
    pub gradnorm: Vec<f64>,
    /// Bit-width used for the update.
    pub sampled: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionRun {
    pub w_star: f64,
    pub bits: Vec<u8>,
    pub scales: Vec<f64>,
    pub seed: u64,
    pub steps: usize,
    pub records: Vec<RegressionRecord>,
}

impl RegressionRun {
    fn column(&self, bits: u8) -> Result<usize> {
        self.bits
            .iter()
            .position(|&b| b == bits)
            .ok_or_else(|| Error::invalid(format!("{bits} bits not recorded")))
    }

    pub fn latent_trajectory(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.latent).collect()
    }

    pub fn gradnorms(&self, bits: u8) -> Result<Vec<f64>> {
        let c = self.column(bits)?;
        Ok(self.records.iter().map(|r| r.gradnorm[c]).collect())
    }

    pub fn brs(&self, bits: u8) -> Result<Brs> {
        Brs::new(bits, self.scales[self.column(bits)?])
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("step,latent_w");
        for b in &self.bits {
            s += &format!(",qw_{b}");
        }
        for b in &self.bits {
            s += &format!(",gradnorm_{b}");
        }
        s += ",sampled\n";
        for r in &self.records {
            s += &format!("{},{}", r.step, r.latent);
            for q in &r.quantized {
                s += &format!(",{q}");
            }
            for g in &r.gradnorm {
                s += &format!(",{g}");
            }
            s += &format!(",{}\n", r.sampled);
        }
        s
    }
}

/// SGD on a scalar weight fitting `y = x * w_star` through `Q_b(w)`, with `b`
/// drawn uniformly from `bits` every step. The reference bit-width is always
/// recorded alongside the trained ones.
pub fn regress2d(cfg: &Regress2dConfig) -> Result<RegressionRun> {
    if cfg.bits.is_empty() {
        return Err(Error::Config("regress2d needs at least one bit-width".into()));
    }
    if cfg.batch == 0 || !(cfg.lr >= 0.0) || !(cfg.reference_scale > 0.0) {
        return Err(Error::Config("regress2d needs batch > 0, lr >= 0, scale > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w_star = match cfg.w_star {
        Some(w) => w,
        None => cfg.draw_target(&mut rng)?,
    };
    let mut bits = cfg.bits.clone();
    if !bits.contains(&cfg.reference_bits) {
        bits.push(cfg.reference_bits);
    }
    bits.sort_unstable();
    let specs = bits
        .iter()
        .map(|&b| QuantSpec::weight(b, cfg.scale_for(b)))
        .collect::<Result<Vec<_>>>()?;
    let mut w = cfg.w0;
    let mut records = Vec::with_capacity(cfg.steps);
    let mut xs = vec![0.0f64; cfg.batch];
    for step in 0..cfg.steps {
        let sampled = cfg.bits[rng.random_range(0..cfg.bits.len())];
        for x in xs.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let mx2 = xs.iter().map(|x| x * x).sum::<f64>() / cfg.batch as f64;
        let mut quantized = Vec::with_capacity(specs.len());
        let mut grads = Vec::with_capacity(specs.len());
        for spec in &specs {
            let q = spec.apply(w);
            let z = w / spec.scale;
            let pass = z >= spec.n_min() as f64 && z <= spec.n_max() as f64;
            let g = if pass { -2.0 * mx2 * (w_star - q) } else { 0.0 };
            quantized.push(q);
            grads.push(g);
        }
        let col = bits.iter().position(|&b| b == sampled).expect("sampled bit recorded");
        let update = grads[col];
        records.push(RegressionRecord {
            step,
            latent: w,
            quantized,
            gradnorm: grads.iter().map(|g| g.abs() / mx2).collect(),
            sampled,
        });
        w -= cfg.lr * update;
    }
    Ok(RegressionRun {
        w_star,
        scales: specs.iter().map(|s| s.scale).collect(),
        bits,
        seed: cfg.seed,
        steps: cfg.steps,
        records,
    })
}

/// Consecutive pairs whose nearest levels differ.
pub fn count_boundary_crossings(trajectory: &[f64], brs: &Brs) -> Result<usize> {
    if trajectory.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    let idx: Vec<usize> = trajectory.iter().map(|&w| brs.nearest_index(w)).collect();
    Ok(idx.windows(2).filter(|p| p[0] != p[1]).count())
}

/// Population variance.
pub fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// `||W_l - Q_b(W_l)||_2` for each requested bit.
pub fn weight_distances(model: &Supernet, layer: usize, bits: &[u8]) -> Result<Vec<f64>> {
    if layer >= model.num_layers() {
        return Err(Error::invalid(format!("layer {layer} out of range")));
    }
    let w = model.latent_weight(layer);
    bits.iter()
        .map(|&b| {
            let q = model.quantized_weight(layer, b)?;
            Ok(w.data()
                .iter()
                .zip(q.data())
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt())
        })
        .collect()
}

/// Distance series recorded during training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceTrace {
    pub layer: usize,
    pub bits: Vec<u8>,
    pub rows: Vec<(u64, Vec<f64>)>,
}

impl DistanceTrace {
    pub fn new(layer: usize, bits: Vec<u8>) -> Self {
        DistanceTrace {
            layer,
            bits,
            rows: Vec::new(),
        }
    }

    pub fn record(&mut self, model: &Supernet, step: u64) -> Result<()> {
        let d = weight_distances(model, self.layer, &self.bits)?;
        self.rows.push((step, d));
        Ok(())
    }

    pub fn series(&self, bits: u8) -> Option<Vec<f64>> {
        let c = self.bits.iter().position(|&b| b == bits)?;
        Some(self.rows.iter().map(|(_, d)| d[c]).collect())
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("step,layer");
        for b in &self.bits {
            s += &format!(",dist_{b}");
        }
        s.push('\n');
        for (step, d) in &self.rows {
            s += &format!("{step},{}", self.layer);
            for v in d {
                s += &format!(",{v}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub layer: usize,
    pub bits: u8,
    pub step: u64,
    /// `bins + 1` uniform edges.
    pub edges: Vec<f64>,
    /// Normalized counts summing to 1.
    pub density: Vec<f64>,
}

impl DensityReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,density\n");
        for (i, d) in self.density.iter().enumerate() {
            s += &format!("{},{},{d}\n", self.edges[i], self.edges[i + 1]);
        }
        s
    }
}

/// Policy with every layer at its max bits except `layer` at `(bits, bits)`
/// (activation bits capped to the layer's candidates).
pub fn probe_policy(model: &Supernet, layer: usize, bits: u8) -> Result<Policy> {
    let space = model.space();
    let mut p = space.max_policy();
    let l = &space.layers[layer];
    if !l.weight.contains(&bits) {
        return Err(Error::invalid(format!("layer {layer} has no {bits}-bit candidate")));
    }
    let a = if l.activation.contains(&bits) {
        bits
    } else {
        *l.activation.last().expect("non-empty")
    };
    p.0[layer] = BitPair::new(bits, a);
    Ok(p)
}

/// Histograms of the per-channel standardized linear-op outputs of `layer`
/// on `batch`, one per bit setting of that layer, over shared bin edges.
/// Batch-norm layers are recalibrated per setting when `calibration` is
/// non-empty.
pub fn output_density(
    model: &Supernet,
    layer: usize,
    bits: &[u8],
    batch: &Batch,
    bins: usize,
    calibration: &[Batch],
    step: u64,
) -> Result<Vec<DensityReport>> {
    if bins < 2 {
        return Err(Error::invalid("output_density needs at least two bins"));
    }
    if layer >= model.num_layers() {
        return Err(Error::invalid(format!("layer {layer} out of range")));
    }
    let mut samples = Vec::with_capacity(bits.len());
    for &b in bits {
        let policy = probe_policy(model, layer, b)?;
        let m = if calibration.is_empty() {
            model.clone()
        } else {
            let mut m = model.clone();
            m.bn_recalibrate(&policy, calibration)?;
            m
        };
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let x = tape.constant(batch.images.clone());
        let out = m.forward(&mut tape, &vars, Some(&policy), x, BnMode::Running)?;
        let std = standardize(tape.value(out.outputs[layer]), 1e-5)?;
        samples.push(std.into_data());
    }
    let lo = samples.iter().flatten().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = samples.iter().flatten().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let hi = if hi > lo { hi } else { lo + 1.0 };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    Ok(bits
        .iter()
        .zip(samples)
        .map(|(&b, s)| {
            let mut counts = vec![0usize; bins];
            for v in &s {
                let i = (((*v as f64 - lo) / width) as usize).min(bins - 1);
                counts[i] += 1;
            }
            let n = s.len().max(1) as f64;
            DensityReport {
                layer,
                bits: b,
                step,
                edges: edges.clone(),
                density: counts.iter().map(|&c| c as f64 / n).collect(),
            }
        })
        .collect())
}

/// `KL(p||q) + KL(q||p)` after adding `smoothing` to every bin and renormalizing.
pub fn symmetric_kl(p: &[f64], q: &[f64], smoothing: f64) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::invalid("symmetric_kl: histograms differ in length"));
    }
    let norm = |v: &[f64]| {
        let s: f64 = v.iter().map(|x| x + smoothing).sum();
        v.iter().map(|x| (x + smoothing) / s).collect::<Vec<_>>()
    };
    let (p, q) = (norm(p), norm(q));
    let kl = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    Ok(kl(&p, &q) + kl(&q, &p))
}

fn policy_loss(model: &Supernet, policy: &Policy, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let x = tape.constant(batch.images.clone());
    let out = model.forward(&mut tape, &vars, Some(policy), x, BnMode::Batch)?;
    let loss = tape.softmax_cross_entropy(out.logits, &batch.labels)?;
    Ok(tape.value(loss).item()? as f64)
}

/// Exact change of the `high` policy's loss on `batch` after one plain SGD
/// step (rate `lr`) of the latent weights on the `low` policy's loss.
/// Batch statistics normalize both evaluations.
pub fn loss_perturbation_probe(model: &Supernet, high: &Policy, low: &Policy, batch: &Batch, lr: f64) -> Result<f64> {
    let before = policy_loss(model, high, batch)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let x = tape.constant(batch.images.clone());
    let out = model.forward(&mut tape, &vars, Some(low), x, BnMode::Batch)?;
    let loss = tape.softmax_cross_entropy(out.logits, &batch.labels)?;
    let grads = tape.backward(loss)?;
    let mut moved = model.clone();
    let roles: Vec<ParamRole> = model.param_info().iter().map(|i| i.role).collect();
    for (i, p) in moved.params_mut().iter_mut().enumerate() {
        if roles[i] != ParamRole::Weight {
            continue;
        }
        if let Some(g) = grads.get(vars[i]) {
            let step: Vec<f32> = p
                .data()
                .iter()
                .zip(g.data())
                .map(|(&w, &g)| (w as f64 - lr * g as f64) as f32)
                .collect();
            *p = Tensor::new(p.shape().to_vec(), step)?;
        }
    }
    let after = policy_loss(&moved, high, batch)?;
    Ok(after - before)
}
