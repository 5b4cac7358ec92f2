//! Feature alignment loss between a low-bit layer output and its max-bit
//! reference, with the gradients reaching the student and the heads.
//!
//! cargo run --example idm_alignment

use bitshare::autodiff::{Tape, Tensor};
use bitshare::idm::{idm_loss, standardize, HeadVars, IdmConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> bitshare::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let shape = [8, 4, 3, 3];
    let n: usize = shape.iter().product();
    let high: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    // A coarse low-bit copy: rounded and rescaled.
    let low: Vec<f64> = high.iter().map(|v| (v * 1.5).round() / 1.5 * 0.8 + 0.1).collect();

    let cfg = IdmConfig::default();
    let mut tape = Tape::new();
    let s = tape.param(Tensor::from_f64(&shape, &low)?);
    let h = tape.constant(Tensor::from_f64(&shape, &high)?);
    let head = HeadVars {
        eta_s: tape.param(Tensor::full(&[4], 1.0)),
        xi_s: tape.param(Tensor::zeros(&[4])),
        eta_h: tape.param(Tensor::full(&[4], 1.0)),
        xi_h: tape.param(Tensor::zeros(&[4])),
    };
    let l = idm_loss(&mut tape, s, h, &head, &cfg)?;
    let grads = tape.backward(l)?;
    println!("alignment loss {:.5} (beta {} in training)", tape.value(l).item()?, cfg.beta);
    let gs = grads.get(s).expect("student gradient");
    println!("student grad norm {:.5}", gs.data().iter().map(|v| v * v).sum::<f64>().sqrt());
    println!("d/d eta_s {:?}", grads.get(head.eta_s).expect("head gradient").data());
    println!("reference receives no gradient: {}", grads.get(h).is_none());

    let st = standardize(&Tensor::from_f64(&shape, &low)?, cfg.eps_stab)?;
    let mean = st.data().iter().sum::<f64>() / n as f64;
    println!("standardized student mean {mean:.2e}");
    Ok(())
}
