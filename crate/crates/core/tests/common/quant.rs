//! Brute-force nearest-level oracle for the fake quantizer.

use bitshare::autodiff::Tensor;
use bitshare::quant::{quantize, QuantKind, QuantSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Explicit level list for `(bits, kind, scale)`.
pub fn levels(bits: u8, kind: QuantKind, scale: f64) -> Vec<(i64, f64)> {
    let (lo, hi): (i64, i64) = match kind {
        QuantKind::Weight => (-(1 << (bits - 1)), (1 << (bits - 1)) - 1),
        QuantKind::Activation => (0, (1 << bits) - 1),
    };
    (lo..=hi).map(|n| (n, n as f64 * scale)).collect()
}

/// Nearest level by exhaustive scan; equidistant candidates resolve away
/// from zero, matching round-half-away.
pub fn oracle(x: f64, bits: u8, kind: QuantKind, scale: f64) -> f64 {
    let z = x / scale;
    let mut best = (f64::INFINITY, 0i64, 0.0);
    for (n, v) in levels(bits, kind, scale) {
        let d = (z - n as f64).abs();
        let better = d < best.0 || (d == best.0 && n.abs() > best.1.abs());
        if better {
            best = (d, n, v);
        }
    }
    best.2
}

pub struct OracleOutcome {
    pub cases: usize,
    pub mismatches: Vec<(f64, u8, QuantKind, f64, f64, f64)>,
}

/// `n` random cases plus exact-tie and out-of-range cases.
pub fn run(n: usize, seed: u64) -> OracleOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let bits = rng.random_range(2..=8u8);
        let kind = if rng.random_bool(0.5) { QuantKind::Weight } else { QuantKind::Activation };
        let scale = 10f64.powf(rng.random_range(-3.0..1.0));
        let reach = (1u32 << bits) as f64 * scale;
        let x = match i % 10 {
            // exact midpoints between levels with dyadic step sizes
            0 => {
                let s = 2f64.powi(-rng.random_range(1..6));
                let k = rng.random_range(-(1i32 << bits)..(1i32 << bits)) as f64;
                cases.push((bits, kind, s, (k + 0.5) * s));
                continue;
            }
            1 => rng.random_range(-4.0 * reach..4.0 * reach),
            _ => rng.random_range(-1.2 * reach..1.2 * reach),
        };
        cases.push((bits, kind, scale, x));
    }
    let mut mismatches = Vec::new();
    for &(bits, kind, scale, x) in &cases {
        let spec = QuantSpec::new(bits, kind, scale).expect("valid spec");
        let t = Tensor::<f64>::new(vec![1], vec![x]).unwrap();
        let got = quantize(&t, &spec).data()[0];
        let want = oracle(x, bits, kind, scale);
        let scalar = spec.apply(x);
        if got != want || scalar != want {
            mismatches.push((x, bits, kind, scale, got, want));
        }
    }
    OracleOutcome { cases: cases.len(), mismatches }
}
