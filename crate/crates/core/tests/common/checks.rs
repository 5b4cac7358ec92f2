//! Self-contained checks for sampling, greedy search and the criterion.

use std::collections::HashMap;

use bitshare::scheduler::{layer_score, CriterionMode};
use bitshare::search::{search, BitOpsModel, SearchConfig};
use bitshare::supernet::{sample_policy, BitPair, BitSpace, FreezeMask, LayerBits, Policy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub type Check = Result<String, String>;

/// Upper-tail p-value of Pearson's statistic against a uniform expectation.
pub fn chi2_uniform_p(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

fn weight_counts(space: &BitSpace, mask: &FreezeMask, layer: usize, draws: usize, rng: &mut ChaCha8Rng) -> HashMap<u8, u64> {
    let mut counts = HashMap::new();
    for _ in 0..draws {
        let p = sample_policy(space, mask, 1.0, rng).expect("sampling");
        *counts.entry(p.layer(layer).w).or_insert(0) += 1;
    }
    counts
}

/// Freezes 2-bit on one layer, samples inside the window, then after expiry.
pub fn freeze_exclusion(draws: usize, seed: u64) -> Check {
    let space = BitSpace::new(4, &[2, 3, 4, 5, 6], &[2, 3, 4, 5, 6], 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = FreezeMask::new();
    let (layer, expiry) = (1, 100);
    if !mask.freeze(&space, layer, 2, expiry) {
        return Err("freeze refused".into());
    }
    let mut frozen_hits = 0u64;
    let mut inside = [0u64; 4];
    for step in 0..draws as u64 {
        mask.purge(step.min(expiry - 1));
        let p = sample_policy(&space, &mask, 1.0, &mut rng).map_err(|e| e.to_string())?;
        let w = p.layer(layer).w;
        if w == 2 {
            frozen_hits += 1;
        } else {
            inside[(w - 3) as usize] += 1;
        }
    }
    let p_in = chi2_uniform_p(&inside);
    mask.purge(expiry);
    if !mask.is_empty() {
        return Err("mask not purged at expiry".into());
    }
    let after = weight_counts(&space, &mask, layer, draws, &mut rng);
    let counts: Vec<u64> = [2u8, 3, 4, 5, 6].iter().map(|b| after.get(b).copied().unwrap_or(0)).collect();
    let p_after = chi2_uniform_p(&counts);
    let detail = format!("frozen draws {frozen_hits}/{draws}, in-window p={p_in:.3}, post-expiry counts {counts:?} p={p_after:.3}");
    if frozen_hits == 0 && p_in > 0.01 && p_after > 0.01 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Space with every layer free over the same sets.
pub fn all_free_space(layers: usize, bits: &[u8]) -> BitSpace {
    BitSpace {
        layers: (0..layers)
            .map(|_| LayerBits { weight: bits.to_vec(), activation: bits.to_vec(), fixed: false })
            .collect(),
    }
}

/// Deterministic pseudo-random loss for every policy of a small space:
/// a decreasing trend in bits plus a per-policy perturbation.
pub fn loss_table(space: &BitSpace, seed: u64) -> HashMap<Vec<(u8, u8)>, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sens: Vec<f64> = space.layers.iter().map(|_| rng.random_range(0.5..3.0)).collect();
    let mut table = HashMap::new();
    let mut stack: Vec<Vec<(u8, u8)>> = vec![vec![]];
    while let Some(prefix) = stack.pop() {
        let l = prefix.len();
        if l == space.layers.len() {
            let trend: f64 = prefix
                .iter()
                .zip(&sens)
                .map(|(&(w, a), s)| s * (2f64.powi(-(w as i32)) + 0.5 * 2f64.powi(-(a as i32))))
                .sum();
            table.insert(prefix, trend * (1.0 + rng.random_range(0.0..0.02)));
            continue;
        }
        for &w in &space.layers[l].weight {
            for &a in &space.layers[l].activation {
                let mut p = prefix.clone();
                p.push((w, a));
                stack.push(p);
            }
        }
    }
    table
}

fn key(p: &Policy) -> Vec<(u8, u8)> {
    p.0.iter().map(|b| (b.w, b.a)).collect()
}

/// Independent neighbor set: per layer the coupled one-level decrease, then
/// the increase.
fn oracle_neighbors(p: &Policy, space: &BitSpace) -> Vec<Policy> {
    let mut out = Vec::new();
    for (l, bits) in space.layers.iter().enumerate() {
        if bits.fixed {
            continue;
        }
        let cur = p.layer(l);
        let wi = bits.weight.iter().position(|&b| b == cur.w).unwrap() as i64;
        let ai = bits.activation.iter().position(|&b| b == cur.a).unwrap() as i64;
        for d in [-1i64, 1] {
            let (nw, na) = (wi + d, ai + d);
            if nw < 0 || na < 0 || nw >= bits.weight.len() as i64 || na >= bits.activation.len() as i64 {
                continue;
            }
            let mut q = p.clone();
            q.0[l] = BitPair::new(bits.weight[nw as usize], bits.activation[na as usize]);
            out.push(q);
        }
    }
    out
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::MAX, f64::min);
    let hi = v.iter().cloned().fold(f64::MIN, f64::max);
    v.iter().map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 }).collect()
}

/// Runs the search on a synthetic table and re-derives each accepted move
/// by exhaustive evaluation of that step's neighbor set.
pub fn greedy_oracle(seed: u64) -> Check {
    let space = all_free_space(3, &[2, 3, 4, 5, 6]);
    let macs = vec![200u64, 300, 150];
    let table = loss_table(&space, seed);
    let model = BitOpsModel::new(macs.clone()).unwrap();
    let bitops = |p: &Policy| -> f64 { p.0.iter().zip(&macs).map(|(b, &m)| (m * b.w as u64 * b.a as u64) as f64).sum() };
    let init = Policy(vec![BitPair::new(6, 6); 3]);
    let budget = 0.3 * bitops(&init);
    let cfg = SearchConfig { budget: Some(budget), lambda: 1.5, max_steps: 100, ..Default::default() };
    let eval = |p: &Policy| -> bitshare::Result<f64> { Ok(table[&key(p)]) };
    let result = search(init.clone(), &space, &model, &eval, &cfg).map_err(|e| e.to_string())?;
    let mut current = init;
    for (t, rec) in result.state.records.iter().enumerate() {
        let neigh = oracle_neighbors(&current, &space);
        let l: Vec<f64> = neigh.iter().map(|p| table[&key(p)]).collect();
        let b: Vec<f64> = neigh.iter().map(&bitops).collect();
        let (ln, bn) = (normalize(&l), normalize(&b));
        let j: Vec<f64> = ln.iter().zip(&bn).map(|(x, y)| x + 1.5 * y).collect();
        let mut best = 0;
        for i in 1..j.len() {
            if j[i] < j[best] {
                best = i;
            }
        }
        let acc = rec.accepted();
        if acc.policy != neigh[best] || (acc.j - j[best]).abs() > 1e-12 {
            return Err(format!("step {t}: accepted {} (J={}), oracle {} (J={})", acc.policy, acc.j, neigh[best], j[best]));
        }
        current = neigh[best].clone();
    }
    if current != result.policy {
        return Err("final policy differs from the last accepted move".into());
    }
    if result.bitops > budget {
        return Err(format!("final bitops {} exceed budget {budget}", result.bitops));
    }
    Ok(format!("{} steps, all accepted moves match the oracle, bitops {} <= {budget}", result.steps, result.bitops))
}

/// Hand example: W = {0.24, 0.5, 0.9, -0.2}, step 1, 2-bit only, eps 0.25.
pub fn criterion_hand_example() -> Check {
    let w = [0.24f32, 0.5, 0.9, -0.2];
    let s = layer_score(&w, &[(2, 1.0)], 0.25, CriterionMode::Bound).map_err(|e| e.to_string())?;
    if s == 0.125 {
        Ok(format!("score {s}"))
    } else {
        Err(format!("score {s}, expected 0.125"))
    }
}

/// Randomized monotonicity and scale invariance sweep.
pub fn criterion_properties(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..cases {
        let n = rng.random_range(1..40);
        let w: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let mut q: Vec<(u8, f64)> = Vec::new();
        for b in 2..=6u8 {
            if rng.random_bool(0.7) {
                q.push((b, rng.random_range(0.01..0.5)));
            }
        }
        let q = if q.is_empty() { vec![(4, 0.1)] } else { q };
        let (e1, e2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        let s_lo = layer_score(&w, &q, lo, CriterionMode::Bound).unwrap();
        let s_hi = layer_score(&w, &q, hi, CriterionMode::Bound).unwrap();
        if s_hi < s_lo {
            return Err(format!("case {i}: score fell from {s_lo} to {s_hi} as eps rose {lo} -> {hi}"));
        }
        let c = 2f64.powi(rng.random_range(-4..5));
        let ws: Vec<f32> = w.iter().map(|&x| x * c as f32).collect();
        let qs: Vec<(u8, f64)> = q.iter().map(|&(b, g)| (b, g * c)).collect();
        let a = layer_score(&w, &q, lo, CriterionMode::Bound).unwrap();
        let b = layer_score(&ws, &qs, lo, CriterionMode::Bound).unwrap();
        if a != b {
            return Err(format!("case {i}: scaling by {c} changed score {a} -> {b}"));
        }
    }
    Ok(format!("{cases} random layers monotone in eps and invariant under joint scaling"))
}
