//! Inference-only bidirectional greedy search over per-layer bit-widths.
//!
//! Starting from a policy (all-max by default), every step scores each
//! single-layer one-level move by `J = norm(loss) + lambda * norm(bitops)`
//! and accepts the minimum, until the BitOps budget is met.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::supernet::{BitPair, BitSpace, Policy, Supernet};

/// `sum_l MAC_l * b_w(l) * b_a(l)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitOpsModel {
    pub macs: Vec<u64>,
}

impl BitOpsModel {
    pub fn new(macs: Vec<u64>) -> Result<Self> {
        if macs.contains(&0) {
            return Err(Error::invalid("every layer needs a positive MAC count"));
        }
        Ok(BitOpsModel { macs })
    }

    pub fn bitops(&self, policy: &Policy) -> Result<f64> {
        if policy.len() != self.macs.len() {
            return Err(Error::invalid(format!(
                "policy has {} layers, BitOps model {}",
                policy.len(),
                self.macs.len()
            )));
        }
        Ok(self
            .macs
            .iter()
            .zip(&policy.0)
            .map(|(&m, p)| m as f64 * p.w as f64 * p.a as f64)
            .sum())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

/// Which bit-widths a move changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Both,
    Weight,
    Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Move {
    pub layer: usize,
    pub direction: Direction,
    pub target: Target,
}

fn shift(set: &[u8], cur: u8, dir: Direction) -> Option<u8> {
    let i = set.iter().position(|&b| b == cur)?;
    match dir {
        Direction::Up => set.get(i + 1).copied(),
        Direction::Down => i.checked_sub(1).map(|j| set[j]),
    }
}

/// One-level moves of single free layers. Coupled moves shift weight and
/// activation bits together (2 per layer); uncoupled moves shift each alone
/// (4 per layer). Moves leaving a candidate set are omitted.
pub fn neighbors(policy: &Policy, space: &BitSpace, coupled: bool) -> Vec<(Move, Policy)> {
    let mut out = Vec::new();
    let targets: &[Target] = if coupled {
        &[Target::Both]
    } else {
        &[Target::Weight, Target::Activation]
    };
    for layer in space.free_layers() {
        let l = &space.layers[layer];
        let cur = policy.layer(layer);
        for &target in targets {
            for direction in [Direction::Down, Direction::Up] {
                let next = match target {
                    Target::Both => shift(&l.weight, cur.w, direction)
                        .zip(shift(&l.activation, cur.a, direction))
                        .map(|(w, a)| BitPair::new(w, a)),
                    Target::Weight => shift(&l.weight, cur.w, direction).map(|w| BitPair::new(w, cur.a)),
                    Target::Activation => shift(&l.activation, cur.a, direction).map(|a| BitPair::new(cur.w, a)),
                };
                if let Some(pair) = next {
                    let mut p = policy.clone();
                    p.0[layer] = pair;
                    out.push((
                        Move {
                            layer,
                            direction,
                            target,
                        },
                        p,
                    ));
                }
            }
        }
    }
    out
}

/// Min-max normalization to `[0, 1]`; a constant vector maps to zeros.
pub fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / span).collect()
}

/// `J_i = norm(loss)_i + lambda * norm(bitops)_i` with the argmin (first on ties).
pub fn objective(losses: &[f64], bitops: &[f64], lambda: f64) -> (Vec<f64>, usize) {
    let l = min_max_normalize(losses);
    let b = min_max_normalize(bitops);
    let j: Vec<f64> = l.iter().zip(&b).map(|(l, b)| l + lambda * b).collect();
    let mut best = 0;
    for (i, v) in j.iter().enumerate() {
        if *v < j[best] {
            best = i;
        }
    }
    (j, best)
}

/// Scores a candidate policy; lower is better.
pub trait CandidateEvaluator: Sync {
    fn loss(&self, policy: &Policy) -> Result<f64>;
}

impl<F> CandidateEvaluator for F
where
    F: Fn(&Policy) -> Result<f64> + Sync,
{
    fn loss(&self, policy: &Policy) -> Result<f64> {
        self(policy)
    }
}

/// Validation cross-entropy of a supernet policy, each candidate on a private
/// copy with batch-norm statistics recalibrated for it.
pub struct SupernetEvaluator<'a> {
    pub model: &'a Supernet,
    pub validation: &'a Dataset,
    pub calibration: Vec<Batch>,
    pub recalibrate: bool,
    pub batch_size: usize,
}

impl CandidateEvaluator for SupernetEvaluator<'_> {
    fn loss(&self, policy: &Policy) -> Result<f64> {
        let report = if self.recalibrate {
            let mut m = self.model.clone();
            m.bn_recalibrate(policy, &self.calibration)?;
            m.evaluate(policy, self.validation, self.batch_size)?
        } else {
            self.model.evaluate(policy, self.validation, self.batch_size)?
        };
        Ok(report.loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub lambda: f64,
    /// BitOps budget; required by [`search`].
    pub budget: Option<f64>,
    pub max_steps: usize,
    pub validation_size: usize,
    pub calibration_batches: usize,
    pub batch_size: usize,
    pub recalibrate: bool,
    pub coupled: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lambda: 1.5,
            budget: None,
            max_steps: 100,
            validation_size: 2000,
            calibration_batches: 8,
            batch_size: 64,
            recalibrate: true,
            coupled: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be finite and non-negative".into()));
        }
        if let Some(c) = self.budget {
            if !(c > 0.0) {
                return Err(Error::Config("budget must be positive".into()));
            }
        }
        if self.validation_size == 0 || self.calibration_batches == 0 || self.batch_size == 0 {
            return Err(Error::Config("search sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub mv: Move,
    pub policy: Policy,
    pub loss: f64,
    pub bitops: f64,
    pub j: f64,
}

/// Full candidate table of one greedy step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub candidates: Vec<Candidate>,
    pub accepted: usize,
}

impl StepRecord {
    pub fn accepted(&self) -> &Candidate {
        &self.candidates[self.accepted]
    }
}

/// One line of the trajectory file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub step: usize,
    pub accepted_layer: usize,
    pub direction: Direction,
    pub bw: u8,
    pub ba: u8,
    pub loss: f64,
    pub bitops: f64,
    #[serde(rename = "J")]
    pub j: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchState {
    pub policy: Policy,
    pub step: usize,
    pub records: Vec<StepRecord>,
}

impl SearchState {
    pub fn new(init: Policy) -> Self {
        SearchState {
            policy: init,
            step: 0,
            records: Vec::new(),
        }
    }

    pub fn trajectory(&self) -> Vec<TrajectoryEntry> {
        self.records
            .iter()
            .map(|r| {
                let c = r.accepted();
                let pair = c.policy.layer(c.mv.layer);
                TrajectoryEntry {
                    step: r.step,
                    accepted_layer: c.mv.layer,
                    direction: c.mv.direction,
                    bw: pair.w,
                    ba: pair.a,
                    loss: c.loss,
                    bitops: c.bitops,
                    j: c.j,
                }
            })
            .collect()
    }
}

/// Evaluates every neighbor (in parallel) and accepts the argmin of `J`.
pub fn greedy_step<E: CandidateEvaluator + ?Sized>(
    state: &mut SearchState,
    space: &BitSpace,
    model: &BitOpsModel,
    evaluator: &E,
    config: &SearchConfig,
) -> Result<()> {
    let neigh = neighbors(&state.policy, space, config.coupled);
    if neigh.is_empty() {
        return Err(Error::invalid("greedy step: empty neighborhood"));
    }
    let losses = neigh
        .par_iter()
        .map(|(_, p)| {
            let l = evaluator.loss(p)?;
            if !l.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss for candidate {p}")));
            }
            Ok(l)
        })
        .collect::<Result<Vec<f64>>>()?;
    let bitops = neigh
        .iter()
        .map(|(_, p)| model.bitops(p))
        .collect::<Result<Vec<f64>>>()?;
    let (j, best) = objective(&losses, &bitops, config.lambda);
    let candidates: Vec<Candidate> = neigh
        .into_iter()
        .zip(losses.iter().zip(&bitops).zip(&j))
        .map(|((mv, policy), ((&loss, &bitops), &j))| Candidate {
            mv,
            policy,
            loss,
            bitops,
            j,
        })
        .collect();
    state.policy = candidates[best].policy.clone();
    state.records.push(StepRecord {
        step: state.step,
        candidates,
        accepted: best,
    });
    state.step += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub policy: Policy,
    pub loss: f64,
    pub bitops: f64,
    pub steps: usize,
    pub state: SearchState,
}

/// Runs greedy steps from `init` until the budget is met or `max_steps` is
/// reached. In the latter case the lowest-loss trajectory policy within the
/// budget is returned, or an error when none was.
pub fn search<E: CandidateEvaluator + ?Sized>(
    init: Policy,
    space: &BitSpace,
    model: &BitOpsModel,
    evaluator: &E,
    config: &SearchConfig,
) -> Result<SearchResult> {
    config.validate()?;
    space.validate(&init)?;
    let floor = model.bitops(&space.min_policy())?;
    let budget = config
        .budget
        .ok_or_else(|| Error::Config("search needs a BitOps budget".into()))?;
    if budget < floor {
        return Err(Error::Infeasible { budget, floor });
    }
    let mut state = SearchState::new(init);
    let mut bitops = model.bitops(&state.policy)?;
    let mut loss = None;
    while bitops > budget && state.step < config.max_steps {
        greedy_step(&mut state, space, model, evaluator, config)?;
        let c = state.records.last().expect("step recorded").accepted();
        bitops = c.bitops;
        loss = Some(c.loss);
    }
    if bitops <= budget {
        let loss = match loss {
            Some(l) => l,
            None => evaluator.loss(&state.policy)?,
        };
        return Ok(SearchResult {
            policy: state.policy.clone(),
            loss,
            bitops,
            steps: state.step,
            state,
        });
    }
    let best = state
        .records
        .iter()
        .map(StepRecord::accepted)
        .filter(|c| c.bitops <= budget)
        .min_by(|a, b| a.loss.total_cmp(&b.loss))
        .cloned();
    match best {
        Some(c) => Ok(SearchResult {
            policy: c.policy,
            loss: c.loss,
            bitops: c.bitops,
            steps: state.step,
            state,
        }),
        None => Err(Error::BudgetUnmet {
            steps: state.step,
            budget,
        }),
    }
}
