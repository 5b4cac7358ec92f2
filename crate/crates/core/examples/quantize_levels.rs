//! Fake quantization of a few values at every candidate bit-width, the level
//! sets involved, and the straight-through / step-size gradients.
//!
//! cargo run --example quantize_levels

use bitshare::autodiff::Tensor;
use bitshare::quant::{distance_to_level, init_scale, quantize, quantize_backward, QuantKind, QuantSpec};

fn main() -> bitshare::Result<()> {
    let xs = [-1.3, -0.4, -0.05, 0.2, 0.61, 2.0];
    let x = Tensor::<f64>::from_f64(&[xs.len()], &xs)?;
    let w = Tensor::<f64>::from_f64(&[6], &[0.3, -0.7, 0.05, 0.9, -0.2, 0.4])?;
    println!("inputs {xs:?}");
    for bits in 2..=6u8 {
        let scale = init_scale(&w, bits, QuantKind::Weight)?;
        let spec = QuantSpec::weight(bits, scale)?;
        let q = quantize(&x, &spec);
        let (gx, gs) = quantize_backward(&Tensor::full(&[xs.len()], 1.0), &x, &spec)?;
        let brs = spec.levels();
        println!(
            "{bits}-bit  scale {scale:.4}  levels [{:.3} .. {:.3}] x{}  q {:?}",
            brs.levels[0],
            brs.levels[brs.levels.len() - 1],
            brs.levels.len(),
            q.data().iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
        println!(
            "        dq/dx {:?}  dq/dscale {gs:.4}  nearest level to 0.2: {:?}",
            gx.data(),
            distance_to_level(0.2, &brs)
        );
    }
    let a = QuantSpec::activation(4, 0.1)?;
    println!("4-bit activation, scale 0.1: 0.73 -> {}, 3.0 -> {}", a.apply(0.73), a.apply(3.0));
    Ok(())
}
