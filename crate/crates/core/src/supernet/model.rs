use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::policy::{BitSpace, Policy};
use super::topology::{content_hash, LayerOp, ResolvedLayer, Topology};
use crate::autodiff::{BatchStats, Tape, Tensor, Var};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::quant::{self, init_scale, QuantKind, QuantSpec, SCALE_FLOOR};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// What a parameter is, used for weight decay and bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    WeightScale(u8),
    ActScale(u8),
    /// IDM gain/shift vectors, in order eta_s, xi_s, eta_h, xi_h.
    Idm(u8),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub layer: usize,
    pub role: ParamRole,
}

/// Per-branch gain and shift vectors of one layer's IDM head, as parameter ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdmSlots {
    pub eta_s: usize,
    pub xi_s: usize,
    pub eta_h: usize,
    pub xi_h: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSlots {
    pub weight: usize,
    pub bias: Option<usize>,
    pub bn: Option<(usize, usize)>,
    pub w_scales: Vec<(u8, usize)>,
    pub a_scales: Vec<(u8, usize)>,
    pub idm: Option<IdmSlots>,
}

impl LayerSlots {
    fn lookup(table: &[(u8, usize)], bits: u8) -> Option<usize> {
        table.iter().find(|(b, _)| *b == bits).map(|(_, id)| *id)
    }

    pub fn w_scale(&self, bits: u8) -> Option<usize> {
        Self::lookup(&self.w_scales, bits)
    }

    pub fn a_scale(&self, bits: u8) -> Option<usize> {
        Self::lookup(&self.a_scales, bits)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// How batch-norm layers normalize during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics (training and recalibration).
    Batch,
    /// Stored running statistics (evaluation).
    Running,
}

/// Result of a forward pass recorded on a tape.
#[derive(Debug)]
pub struct ForwardOut {
    pub logits: Var,
    /// Output of each layer's linear op, before normalization.
    pub outputs: Vec<Var>,
    pub batch_stats: Vec<Option<BatchStats>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

/// Weight-sharing quantized network: one latent weight tensor per layer,
/// with a learnable step size for every candidate bit-width.
#[derive(Clone, Debug)]
pub struct Supernet {
    topology: Topology,
    layers: Vec<ResolvedLayer>,
    space: BitSpace,
    params: Vec<Tensor<f32>>,
    info: Vec<ParamInfo>,
    slots: Vec<LayerSlots>,
    running: Vec<Option<RunningStats>>,
}

impl Supernet {
    /// Builds a network with He-normal latent weights drawn from `seed`.
    /// Activation step sizes start at 1 until [`Supernet::init_activation_scales`].
    pub fn new(topology: Topology, space: BitSpace, seed: u64) -> Result<Self> {
        let layers = topology.resolve()?;
        if layers.len() != space.len() {
            return Err(Error::Config(format!(
                "bit space has {} layers, topology has {}",
                space.len(),
                layers.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut info = Vec::new();
        let mut push = |t: Tensor<f32>, layer: usize, role: ParamRole, name: String| {
            params.push(t);
            info.push(ParamInfo { name, layer, role });
            params.len() - 1
        };
        let mut slots = Vec::with_capacity(layers.len());
        let mut running = Vec::with_capacity(layers.len());
        for (i, (l, bits)) in layers.iter().zip(&space.layers).enumerate() {
            let shape = l.weight_shape();
            let std = (2.0 / l.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
            let w = Tensor::new(shape, data)?;
            let w_scales = bits
                .weight
                .iter()
                .map(|&b| {
                    let s = init_scale(&w, b, QuantKind::Weight)?;
                    Ok((b, Tensor::scalar(s as f32)))
                })
                .collect::<Result<Vec<_>>>()?;
            let ch = l.out_channels();
            let weight = push(w, i, ParamRole::Weight, format!("l{i}.weight"));
            let bias = l
                .bias
                .then(|| push(Tensor::zeros(&[ch]), i, ParamRole::Bias, format!("l{i}.bias")));
            let bn = l.bn.then(|| {
                (
                    push(Tensor::full(&[ch], 1.0), i, ParamRole::BnGamma, format!("l{i}.bn.gamma")),
                    push(Tensor::zeros(&[ch]), i, ParamRole::BnBeta, format!("l{i}.bn.beta")),
                )
            });
            let w_scales = w_scales
                .into_iter()
                .map(|(b, t)| (b, push(t, i, ParamRole::WeightScale(b), format!("l{i}.wscale.{b}"))))
                .collect();
            let a_scales = bits
                .activation
                .iter()
                .map(|&b| (b, push(Tensor::scalar(1.0), i, ParamRole::ActScale(b), format!("l{i}.ascale.{b}"))))
                .collect();
            let idm = (!bits.fixed).then(|| {
                let mut head = |k: u8, name: &str, v: f32| {
                    push(Tensor::full(&[ch], v), i, ParamRole::Idm(k), format!("l{i}.idm.{name}"))
                };
                IdmSlots {
                    eta_s: head(0, "eta_s", 1.0),
                    xi_s: head(1, "xi_s", 0.0),
                    eta_h: head(2, "eta_h", 1.0),
                    xi_h: head(3, "xi_h", 0.0),
                }
            });
            slots.push(LayerSlots {
                weight,
                bias,
                bn,
                w_scales,
                a_scales,
                idm,
            });
            running.push(l.bn.then(|| RunningStats {
                mean: vec![0.0; ch],
                var: vec![1.0; ch],
            }));
        }
        Ok(Supernet {
            topology,
            layers,
            space,
            params,
            info,
            slots,
            running,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn layers(&self) -> &[ResolvedLayer] {
        &self.layers
    }

    pub fn space(&self) -> &BitSpace {
        &self.space
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn slots(&self, layer: usize) -> &LayerSlots {
        &self.slots[layer]
    }

    pub fn running_stats(&self) -> &[Option<RunningStats>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [Option<RunningStats>] {
        &mut self.running
    }

    /// Hash tying checkpoints to this exact topology and bit space.
    pub fn topology_hash(&self) -> String {
        content_hash(&(&self.topology, &self.space))
    }

    pub fn macs(&self) -> Vec<u64> {
        self.layers.iter().map(|l| l.macs).collect()
    }

    pub fn latent_weight(&self, layer: usize) -> &Tensor<f32> {
        &self.params[self.slots[layer].weight]
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::invalid(format!(
                "layer {layer} out of range (model has {})",
                self.layers.len()
            )));
        }
        Ok(())
    }

    pub fn weight_scale(&self, layer: usize, bits: u8) -> Result<f64> {
        self.check_layer(layer)?;
        let id = self.slots[layer]
            .w_scale(bits)
            .ok_or_else(|| Error::invalid(format!("layer {layer} has no {bits}-bit weight quantizer")))?;
        Ok(self.params[id].data()[0] as f64)
    }

    pub fn weight_quant(&self, layer: usize, bits: u8) -> Result<QuantSpec> {
        QuantSpec::weight(bits, self.weight_scale(layer, bits)?)
    }

    /// Quantized view of a layer's latent weights.
    pub fn quantized_weight(&self, layer: usize, bits: u8) -> Result<Tensor<f32>> {
        let spec = self.weight_quant(layer, bits)?;
        Ok(quant::quantize(self.latent_weight(layer), &spec))
    }

    /// Keeps every step size at or above the floor after an update.
    pub fn clamp_scales(&mut self) {
        for (p, info) in self.params.iter_mut().zip(&self.info) {
            if matches!(info.role, ParamRole::WeightScale(_) | ParamRole::ActScale(_)) {
                for v in p.data_mut() {
                    *v = v.max(SCALE_FLOOR as f32);
                }
            }
        }
    }

    /// Copies every parameter onto the tape.
    pub fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect()
    }

    /// Records a forward pass. With `policy = None` nothing is quantized.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        vars: &[Var],
        policy: Option<&Policy>,
        images: Var,
        bn: BnMode,
    ) -> Result<ForwardOut> {
        if let Some(p) = policy {
            self.space.validate(p)?;
        }
        let mut x = images;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut batch_stats = Vec::with_capacity(self.layers.len());
        for (i, (l, s)) in self.layers.iter().zip(&self.slots).enumerate() {
            if matches!(l.op, LayerOp::Fc { .. }) && tape.shape(x).len() != 2 {
                x = tape.flatten(x)?;
            }
            let mut w = vars[s.weight];
            if let Some(p) = policy {
                let bits = p.layer(i);
                let a_id = s.a_scale(bits.a).expect("validated");
                let w_id = s.w_scale(bits.w).expect("validated");
                x = quant::quantize_on_tape(tape, x, vars[a_id], bits.a, QuantKind::Activation)?;
                w = quant::quantize_on_tape(tape, w, vars[w_id], bits.w, QuantKind::Weight)?;
            }
            let y = match l.op {
                LayerOp::Conv { stride, padding, .. } => tape.conv2d(x, w, stride, padding)?,
                LayerOp::Fc { .. } => tape.linear(x, w)?,
            };
            outputs.push(y);
            let mut z = y;
            let mut stats = None;
            if let Some((g, b)) = s.bn {
                let running = match bn {
                    BnMode::Batch => None,
                    BnMode::Running => {
                        let r = self.running[i].as_ref().expect("bn layer has running stats");
                        Some((r.mean.as_slice(), r.var.as_slice()))
                    }
                };
                let (out, st) = tape.batch_norm(z, vars[g], vars[b], BN_EPS, running)?;
                z = out;
                stats = st;
            }
            if let Some(b) = s.bias {
                z = tape.add_channel(z, vars[b])?;
            }
            if l.relu {
                z = tape.relu(z);
            }
            batch_stats.push(stats);
            x = z;
        }
        Ok(ForwardOut {
            logits: x,
            outputs,
            batch_stats,
        })
    }

    /// Exponential moving update of the running statistics.
    pub fn update_running(&mut self, stats: &[Option<BatchStats>]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            if let (Some(r), Some(s)) = (r.as_mut(), s.as_ref()) {
                for (rm, &m) in r.mean.iter_mut().zip(&s.mean) {
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m as f32;
                }
                for (rv, &v) in r.var.iter_mut().zip(&s.var) {
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v as f32;
                }
            }
        }
    }

    /// Sets every activation step size from the float-precision inputs each
    /// layer sees on `batch`.
    pub fn init_activation_scales(&mut self, batch: &Batch) -> Result<()> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(batch.images.clone());
        let out = self.forward(&mut tape, &vars, None, x, BnMode::Batch)?;
        // inputs of layer i are the post-activation outputs of layer i-1
        let mut inputs = vec![batch.images.clone()];
        for (i, l) in self.layers.iter().enumerate().take(self.layers.len() - 1) {
            let mut t = tape.value(out.outputs[i]).clone();
            if let (Some(s), Some((g, b))) = (&out.batch_stats[i], self.slots[i].bn) {
                let (n, ch, inner) = t.channel_layout().expect("layer output has channels");
                let (gv, bv) = (self.params[g].data(), self.params[b].data());
                let d = t.data_mut();
                for bi in 0..n {
                    for c in 0..ch {
                        let inv = 1.0 / (s.var[c] + BN_EPS).sqrt();
                        for v in &mut d[(bi * ch + c) * inner..(bi * ch + c + 1) * inner] {
                            *v = gv[c] * ((*v as f64 - s.mean[c]) * inv) as f32 + bv[c];
                        }
                    }
                }
            }
            if l.relu {
                t = t.map(|v| v.max(0.0));
            }
            inputs.push(t);
        }
        for (i, input) in inputs.iter().enumerate() {
            for &(b, id) in &self.slots[i].a_scales {
                let s = init_scale(input, b, QuantKind::Activation)?;
                self.params[id] = Tensor::scalar(s as f32);
            }
        }
        Ok(())
    }

    /// Recomputes running statistics under `policy` as the plain average of
    /// per-batch statistics. Parameters are left untouched.
    pub fn bn_recalibrate(&mut self, policy: &Policy, batches: &[Batch]) -> Result<()> {
        if batches.is_empty() {
            return Err(Error::invalid("bn_recalibrate needs at least one batch"));
        }
        let mut sums: Vec<Option<(Vec<f64>, Vec<f64>)>> = self
            .running
            .iter()
            .map(|r| r.as_ref().map(|r| (vec![0.0; r.mean.len()], vec![0.0; r.var.len()])))
            .collect();
        for batch in batches {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let x = tape.constant(batch.images.clone());
            let out = self.forward(&mut tape, &vars, Some(policy), x, BnMode::Batch)?;
            for (acc, st) in sums.iter_mut().zip(&out.batch_stats) {
                if let (Some((m, v)), Some(st)) = (acc.as_mut(), st.as_ref()) {
                    m.iter_mut().zip(&st.mean).for_each(|(a, b)| *a += b);
                    v.iter_mut().zip(&st.var).for_each(|(a, b)| *a += b);
                }
            }
        }
        let n = batches.len() as f64;
        for (r, acc) in self.running.iter_mut().zip(sums) {
            if let (Some(r), Some((m, v))) = (r.as_mut(), acc) {
                r.mean = m.iter().map(|x| (x / n) as f32).collect();
                r.var = v.iter().map(|x| (x / n) as f32).collect();
            }
        }
        Ok(())
    }

    /// Logits under `policy` with running batch-norm statistics.
    pub fn predict(&self, policy: &Policy, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &vars, Some(policy), x, BnMode::Running)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Mean cross-entropy and top-1 accuracy over a dataset.
    pub fn evaluate(&self, policy: &Policy, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in data.batches(batch_size) {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let x = tape.constant(batch.images.clone());
            let out = self.forward(&mut tape, &vars, Some(policy), x, BnMode::Running)?;
            let loss = tape.softmax_cross_entropy(out.logits, &batch.labels)?;
            let l = tape.value(loss).item()? as f64;
            if !l.is_finite() {
                return Err(Error::Numerical(format!("non-finite evaluation loss under {policy}")));
            }
            loss_sum += l * batch.labels.len() as f64;
            correct += count_correct(tape.value(out.logits), &batch.labels);
        }
        let n = data.len();
        if n == 0 {
            return Err(Error::invalid("evaluate: empty dataset"));
        }
        Ok(EvalReport {
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
            samples: n,
        })
    }
}

/// Number of rows of `logits: [N, K]` whose argmax (first on ties) equals the label.
pub fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count()
}
