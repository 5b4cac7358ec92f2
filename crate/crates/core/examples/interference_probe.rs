//! Scalar regression with a shared latent weight: trains on 4 bits alone and
//! on {2, 4} from the same seed, then compares the 4-bit gradient variance
//! and the number of 4-bit bound crossings.
//!
//! cargo run --release --example interference_probe -- [seeds]

use bitshare::analysis::{count_boundary_crossings, median, regress2d, variance, Regress2dConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bitshare::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let mut ratios = Vec::new();
    let mut more_crossings = 0;
    for seed in 0..seeds {
        let base = Regress2dConfig { seed, ..Default::default() };
        let w_star = base.draw_target(&mut ChaCha8Rng::seed_from_u64(seed))?;
        let shared = regress2d(&Regress2dConfig { w_star: Some(w_star), ..base.clone() })?;
        let single = regress2d(&Regress2dConfig { bits: vec![4], w_star: Some(w_star), ..base })?;
        let var = |r: &bitshare::analysis::RegressionRun| -> bitshare::Result<f64> { Ok(variance(&r.gradnorms(4)?)) };
        let cross = |r: &bitshare::analysis::RegressionRun| -> bitshare::Result<usize> {
            count_boundary_crossings(&r.latent_trajectory(), &r.brs(4)?)
        };
        let (vs, v1, cs, c1) = (var(&shared)?, var(&single)?, cross(&shared)?, cross(&single)?);
        ratios.push(vs / v1);
        if cs > c1 {
            more_crossings += 1;
        }
        println!("seed {seed:>2}  w* {w_star:+.3}  var ratio {:.2}  crossings {cs} vs {c1}", vs / v1);
    }
    println!("median variance ratio {:.2}, more crossings in {more_crossings}/{seeds} seeds", median(&ratios));
    Ok(())
}
