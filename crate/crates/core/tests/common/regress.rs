//! Toy scalar regression under single and shared bit-widths.

use bitshare::analysis::{count_boundary_crossings, regress2d, Regress2dConfig};

use super::checks::Check;

pub struct PairedSeed {
    pub seed: u64,
    pub variance_ratio: f64,
    pub crossings_single: usize,
    pub crossings_shared: usize,
}

fn pop_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

pub fn paired(seeds: u64) -> Vec<PairedSeed> {
    (0..seeds)
        .map(|seed| {
            let single = regress2d(&Regress2dConfig { bits: vec![4], seed, ..Default::default() }).unwrap();
            let shared = regress2d(&Regress2dConfig { bits: vec![2, 4], seed, ..Default::default() }).unwrap();
            assert_eq!(single.w_star, shared.w_star, "paired runs share the target");
            let v1 = pop_variance(&single.gradnorms(4).unwrap());
            let v2 = pop_variance(&shared.gradnorms(4).unwrap());
            let c = |r: &bitshare::analysis::RegressionRun| count_boundary_crossings(&r.latent_trajectory(), &r.brs(4).unwrap()).unwrap();
            PairedSeed {
                seed,
                variance_ratio: if v1 > 0.0 { v2 / v1 } else if v2 > 0.0 { f64::INFINITY } else { 1.0 },
                crossings_single: c(&single),
                crossings_shared: c(&shared),
            }
        })
        .collect()
}

pub fn interference_2d() -> Check {
    let rows = paired(20);
    let mut ratios: Vec<f64> = rows.iter().map(|r| r.variance_ratio).collect();
    ratios.sort_by(f64::total_cmp);
    let med = 0.5 * (ratios[9] + ratios[10]);
    let higher = rows.iter().filter(|r| r.crossings_shared > r.crossings_single).count();
    let detail = format!("median variance ratio {med:.3}, crossings higher in {higher}/20 seeds");
    if med >= 1.5 && higher * 10 >= 8 * rows.len() {
        Ok(detail)
    } else {
        Err(detail)
    }
}
