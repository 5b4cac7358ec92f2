use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{MAX_BITS, MIN_BITS};

/// Candidate bit-widths of one layer. Fixed layers carry a single
/// candidate for weights and activations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBits {
    pub weight: Vec<u8>,
    pub activation: Vec<u8>,
    pub fixed: bool,
}

impl LayerBits {
    pub fn min_weight(&self) -> u8 {
        self.weight[0]
    }

    pub fn max_weight(&self) -> u8 {
        *self.weight.last().expect("non-empty")
    }
}

/// Per-layer candidate sets for a whole network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitSpace {
    pub layers: Vec<LayerBits>,
}

fn check_set(name: &str, bits: &[u8]) -> Result<()> {
    if bits.is_empty() {
        return Err(Error::Config(format!("{name} bit set is empty")));
    }
    if bits.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::Config(format!("{name} bit set {bits:?} must be strictly increasing")));
    }
    if bits.iter().any(|b| !(MIN_BITS..=MAX_BITS).contains(b)) {
        return Err(Error::Config(format!(
            "{name} bit set {bits:?} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

impl BitSpace {
    /// First and last layers get `fixed_bits`; the rest share the given sets.
    pub fn new(num_layers: usize, weight: &[u8], activation: &[u8], fixed_bits: u8) -> Result<Self> {
        check_set("weight", weight)?;
        check_set("activation", activation)?;
        check_set("fixed", &[fixed_bits])?;
        if num_layers < 2 {
            return Err(Error::Config("need at least two layers".into()));
        }
        let layers = (0..num_layers)
            .map(|i| {
                if i == 0 || i + 1 == num_layers {
                    LayerBits {
                        weight: vec![fixed_bits],
                        activation: vec![fixed_bits],
                        fixed: true,
                    }
                } else {
                    LayerBits {
                        weight: weight.to_vec(),
                        activation: activation.to_vec(),
                        fixed: false,
                    }
                }
            })
            .collect();
        Ok(BitSpace { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Indices of layers whose bits are searched and trained jointly.
    pub fn free_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().enumerate().filter(|(_, l)| !l.fixed).map(|(i, _)| i)
    }

    pub fn max_policy(&self) -> Policy {
        Policy(
            self.layers
                .iter()
                .map(|l| BitPair::new(l.max_weight(), *l.activation.last().expect("non-empty")))
                .collect(),
        )
    }

    pub fn min_policy(&self) -> Policy {
        Policy(self.layers.iter().map(|l| BitPair::new(l.weight[0], l.activation[0])).collect())
    }

    /// Policy with `(bits, bits)` on every free layer and the fixed bits elsewhere.
    pub fn uniform_policy(&self, bits: u8) -> Result<Policy> {
        let pairs = self
            .layers
            .iter()
            .map(|l| {
                if l.fixed {
                    Ok(BitPair::new(l.weight[0], l.activation[0]))
                } else if l.weight.contains(&bits) && l.activation.contains(&bits) {
                    Ok(BitPair::new(bits, bits))
                } else {
                    Err(Error::invalid(format!("{bits} bits not in candidate set")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Policy(pairs))
    }

    pub fn validate(&self, policy: &Policy) -> Result<()> {
        if policy.0.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "policy has {} layers, model has {}",
                policy.0.len(),
                self.layers.len()
            )));
        }
        for (i, (p, l)) in policy.0.iter().zip(&self.layers).enumerate() {
            if !l.weight.contains(&p.w) || !l.activation.contains(&p.a) {
                return Err(Error::invalid(format!(
                    "layer {i}: ({}, {}) not in candidates w{:?} a{:?}",
                    p.w, p.a, l.weight, l.activation
                )));
            }
        }
        Ok(())
    }
}

/// Weight and activation bit-width of one layer; serialized as `[w, a]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(u8, u8)", into = "(u8, u8)")]
pub struct BitPair {
    pub w: u8,
    pub a: u8,
}

impl BitPair {
    pub fn new(w: u8, a: u8) -> Self {
        BitPair { w, a }
    }
}

impl From<(u8, u8)> for BitPair {
    fn from((w, a): (u8, u8)) -> Self {
        BitPair { w, a }
    }
}

impl From<BitPair> for (u8, u8) {
    fn from(p: BitPair) -> Self {
        (p.w, p.a)
    }
}

/// Per-layer bit assignment.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Policy(pub Vec<BitPair>);

impl Policy {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn layer(&self, i: usize) -> BitPair {
        self.0[i]
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|p| format!("{}/{}", p.w, p.a)).collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeEntry {
    pub layer: usize,
    pub bit: u8,
    /// First step at which the entry no longer applies.
    pub expiry: u64,
}

/// Weight bits temporarily excluded from sampling.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    entries: Vec<FreezeEntry>,
}

impl FreezeMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[FreezeEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_frozen(&self, layer: usize, bit: u8) -> bool {
        self.entries.iter().any(|e| e.layer == layer && e.bit == bit)
    }

    /// Drops entries whose expiry is at or before `step`.
    pub fn purge(&mut self, step: u64) {
        self.entries.retain(|e| e.expiry > step);
    }

    pub fn unfrozen_weight_bits<'a>(&'a self, space: &'a BitSpace, layer: usize) -> impl Iterator<Item = u8> + 'a {
        space.layers[layer]
            .weight
            .iter()
            .copied()
            .filter(move |&b| !self.is_frozen(layer, b))
    }

    pub fn smallest_unfrozen(&self, space: &BitSpace, layer: usize) -> Option<u8> {
        self.unfrozen_weight_bits(space, layer).next()
    }

    /// Freezes `bit` of `layer` until `expiry`. Refuses (returns `false`) for
    /// fixed layers, bits outside the candidate set, and when `bit` is the
    /// layer's last unfrozen candidate.
    pub fn freeze(&mut self, space: &BitSpace, layer: usize, bit: u8, expiry: u64) -> bool {
        let Some(l) = space.layers.get(layer) else {
            return false;
        };
        if l.fixed || !l.weight.contains(&bit) {
            return false;
        }
        if let Some(e) = self.entries.iter_mut().find(|e| e.layer == layer && e.bit == bit) {
            e.expiry = e.expiry.max(expiry);
            return true;
        }
        if self.unfrozen_weight_bits(space, layer).count() <= 1 {
            return false;
        }
        self.entries.push(FreezeEntry { layer, bit, expiry });
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Sampled policies per step.
    pub mc_samples: usize,
    pub seed: u64,
    /// Also train the all-max-bit policy every step.
    pub include_max_policy: bool,
    /// Relative sampling weight of each layer's smallest weight candidate
    /// (1.0 is uniform).
    pub low_bit_weight: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mc_samples: 2,
            seed: 0,
            include_max_policy: true,
            low_bit_weight: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if !(self.low_bit_weight > 0.0 && self.low_bit_weight.is_finite()) {
            return Err(Error::Config("low_bit_weight must be positive".into()));
        }
        Ok(())
    }
}

/// Serializable ChaCha stream position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Draws random policies from a [`BitSpace`], skipping frozen weight bits.
#[derive(Clone, Debug)]
pub struct PolicySampler {
    pub config: SamplerConfig,
    rng: ChaCha8Rng,
}

impl PolicySampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(PolicySampler { config, rng })
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn set_rng_state(&mut self, state: &RngState) {
        self.rng = state.restore();
    }

    pub fn sample(&mut self, space: &BitSpace, mask: &FreezeMask) -> Result<Policy> {
        sample_policy(space, mask, self.config.low_bit_weight, &mut self.rng)
    }
}

/// Independent per-layer draw: weight bit over the unfrozen candidates
/// (lowest candidate weighted by `low_bit_weight`), activation bit uniform.
pub fn sample_policy<R: Rng + ?Sized>(
    space: &BitSpace,
    mask: &FreezeMask,
    low_bit_weight: f64,
    rng: &mut R,
) -> Result<Policy> {
    let mut pairs = Vec::with_capacity(space.len());
    for (i, l) in space.layers.iter().enumerate() {
        if l.fixed {
            pairs.push(BitPair::new(l.weight[0], l.activation[0]));
            continue;
        }
        let avail: Vec<u8> = mask.unfrozen_weight_bits(space, i).collect();
        if avail.is_empty() {
            return Err(Error::invalid(format!("layer {i}: every weight candidate is frozen")));
        }
        let weight_of = |b: u8| if b == l.weight[0] { low_bit_weight } else { 1.0 };
        let w = if low_bit_weight == 1.0 {
            avail[rng.random_range(0..avail.len())]
        } else {
            let total: f64 = avail.iter().map(|&b| weight_of(b)).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = *avail.last().expect("non-empty");
            for &b in &avail {
                u -= weight_of(b);
                if u < 0.0 {
                    pick = b;
                    break;
                }
            }
            pick
        };
        let a = l.activation[rng.random_range(0..l.activation.len())];
        pairs.push(BitPair::new(w, a));
    }
    Ok(Policy(pairs))
}

/// Weight-decay multiplier per layer: 1 where the sampled weight bit is the
/// layer's largest candidate, 0 otherwise.
pub fn fairness_decay_mask(space: &BitSpace, policy: &Policy) -> Vec<f64> {
    space
        .layers
        .iter()
        .zip(&policy.0)
        .map(|(l, p)| if p.w == l.max_weight() { 1.0 } else { 0.0 })
        .collect()
}
