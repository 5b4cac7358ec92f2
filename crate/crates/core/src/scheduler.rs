//! Dynamic bit-width scheduling. Each free layer gets an instability score
//! from how close its latent weights sit to quantization bounds; the
//! smallest unfrozen bit of the top-K layers is then excluded from sampling
//! for a while, with K decaying on a cosine.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{distance_to_level, Brs};
use crate::supernet::{FreezeMask, Supernet};

/// How the per-bit unstable-weight count is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriterionMode {
    /// Weights within `eps * scale / 2` of a quantization bound.
    #[default]
    Bound,
    /// Per level `q`, weights with `|w| <= scale * (1 - eps) / 2 + q`.
    Literal,
}

impl fmt::Display for CriterionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CriterionMode::Bound => "bound",
            CriterionMode::Literal => "literal",
        })
    }
}

impl FromStr for CriterionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bound" => Ok(CriterionMode::Bound),
            "literal" => Ok(CriterionMode::Literal),
            other => Err(Error::Config(format!("unknown criterion mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub score: f64,
}

/// Instability scores of the free layers at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub scores: Vec<LayerScore>,
    pub mode: CriterionMode,
    pub epsilon: f64,
    pub step: u64,
}

impl CriterionReport {
    pub const CSV_HEADER: &'static str = "layer,score,mode,epsilon,step";

    pub fn csv_rows(&self) -> impl Iterator<Item = String> + '_ {
        self.scores
            .iter()
            .map(move |s| format!("{},{},{},{},{}", s.layer, s.score, self.mode, self.epsilon, self.step))
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::invalid(format!("criterion epsilon {eps} outside [0, 1]")));
    }
    Ok(())
}

/// Number of weights counted unstable at one bit-width.
pub fn unstable_count(weights: &[f32], brs: &Brs, eps: f64, mode: CriterionMode) -> Result<usize> {
    check_eps(eps)?;
    let g = brs.scale;
    Ok(match mode {
        CriterionMode::Bound => {
            let threshold = (1.0 - eps) * g / 2.0;
            weights
                .iter()
                .filter(|&&w| distance_to_level(w as f64, brs).1 >= threshold)
                .count()
        }
        CriterionMode::Literal => brs
            .levels
            .iter()
            .map(|&q| {
                let t = g * ((1.0 - eps) / 2.0 + q / g);
                weights.iter().filter(|&&w| (w as f64).abs() <= t).count()
            })
            .sum(),
    })
}

/// Score of one layer: `sum_b 2^(1-b) * count_b / numel` over the given
/// `(bits, scale)` weight quantizers.
pub fn layer_score(weights: &[f32], quantizers: &[(u8, f64)], eps: f64, mode: CriterionMode) -> Result<f64> {
    check_eps(eps)?;
    if weights.is_empty() {
        return Err(Error::invalid("layer_score: empty weight tensor"));
    }
    let mut score = 0.0;
    for &(bits, scale) in quantizers {
        let brs = Brs::new(bits, scale)?;
        let count = unstable_count(weights, &brs, eps, mode)?;
        score += 2f64.powi(1 - bits as i32) * count as f64 / weights.len() as f64;
    }
    Ok(score)
}

/// Scores every free layer of the supernet.
pub fn unstable_criterion(model: &Supernet, eps: f64, mode: CriterionMode, step: u64) -> Result<CriterionReport> {
    check_eps(eps)?;
    let space = model.space();
    let scores = space
        .free_layers()
        .map(|l| {
            let quantizers = space.layers[l]
                .weight
                .iter()
                .map(|&b| Ok((b, model.weight_scale(l, b)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerScore {
                layer: l,
                score: layer_score(model.latent_weight(l).data(), &quantizers, eps, mode)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CriterionReport {
        scores,
        mode,
        epsilon: eps,
        step,
    })
}

/// Layers of the `k` largest scores, highest first; ties go to the lower index.
pub fn topk_to_freeze(report: &CriterionReport, k: usize) -> Result<Vec<usize>> {
    if k > report.scores.len() {
        return Err(Error::invalid(format!(
            "top-k {k} exceeds {} scored layers",
            report.scores.len()
        )));
    }
    let mut ranked = report.scores.clone();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.layer.cmp(&b.layer)));
    Ok(ranked.into_iter().take(k).map(|s| s.layer).collect())
}

/// Cosine decay `round(k0 * (1 + cos(pi * t / total)) / 2)`.
pub fn k_schedule(t: u64, total: u64, k0: usize) -> Result<usize> {
    if total == 0 {
        return Err(Error::invalid("k_schedule: total steps must be positive"));
    }
    if t > total {
        return Err(Error::invalid(format!("k_schedule: step {t} beyond {total}")));
    }
    let c = 0.5 * (1.0 + (PI * t as f64 / total as f64).cos());
    Ok((k0 as f64 * c).round() as usize)
}

/// Schedule settings as they appear in a config; unset fields are filled
/// from the training run by [`ScheduleConfig::resolve`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub enabled: bool,
    /// Initial top-K; defaults to half the free layers, rounded up.
    pub k0: Option<usize>,
    /// Steps over which K decays; defaults to the whole run.
    pub total_steps: Option<u64>,
    /// Steps between re-evaluations; defaults to one epoch.
    pub period: Option<u64>,
    /// Steps a freeze lasts; defaults to one epoch.
    pub duration: Option<u64>,
    pub epsilon: Option<f64>,
    pub mode: CriterionMode,
}

pub const DEFAULT_EPSILON: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub k0: usize,
    pub total_steps: u64,
    pub period: u64,
    pub duration: u64,
    pub epsilon: f64,
    pub mode: CriterionMode,
}

impl ScheduleConfig {
    pub fn resolve(&self, free_layers: usize, total_steps: u64, steps_per_epoch: u64) -> Result<Schedule> {
        let s = Schedule {
            k0: self.k0.unwrap_or(free_layers.div_ceil(2)),
            total_steps: self.total_steps.unwrap_or(total_steps),
            period: self.period.unwrap_or(steps_per_epoch),
            duration: self.duration.unwrap_or(steps_per_epoch),
            epsilon: self.epsilon.unwrap_or(DEFAULT_EPSILON),
            mode: self.mode,
        };
        s.validate(free_layers)?;
        Ok(s)
    }
}

impl Schedule {
    pub fn validate(&self, free_layers: usize) -> Result<()> {
        if self.k0 > free_layers {
            return Err(Error::Config(format!("k0 {} exceeds {free_layers} free layers", self.k0)));
        }
        if self.period == 0 || self.duration == 0 || self.total_steps == 0 {
            return Err(Error::Config("schedule period, duration and length must be positive".into()));
        }
        check_eps(self.epsilon).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn k_at(&self, step: u64) -> usize {
        k_schedule(step.min(self.total_steps), self.total_steps, self.k0).expect("validated")
    }

    pub fn is_boundary(&self, step: u64) -> bool {
        step.is_multiple_of(self.period)
    }
}

/// On period boundaries: purges expired freezes, scores layers and freezes
/// the smallest unfrozen bit of the top-K. Returns the report when it ran.
pub fn apply_schedule(
    model: &Supernet,
    mask: &mut FreezeMask,
    step: u64,
    schedule: &Schedule,
) -> Result<Option<CriterionReport>> {
    if !schedule.is_boundary(step) {
        return Ok(None);
    }
    mask.purge(step);
    let report = unstable_criterion(model, schedule.epsilon, schedule.mode, step)?;
    let k = schedule.k_at(step).min(report.scores.len());
    for layer in topk_to_freeze(&report, k)? {
        if let Some(bit) = mask.smallest_unfrozen(model.space(), layer) {
            mask.freeze(model.space(), layer, bit, step + schedule.duration);
        }
    }
    Ok(Some(report))
}
