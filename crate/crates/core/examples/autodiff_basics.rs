//! Reverse-mode differentiation on a small tape: a two-layer perceptron with
//! cross-entropy, its gradients, and a finite-difference spot check.
//!
//! cargo run --example autodiff_basics

use bitshare::autodiff::{Tape, Tensor};

fn loss(w1: &Tensor<f64>, w2: &Tensor<f64>, x: &Tensor<f64>, labels: &[usize]) -> bitshare::Result<f64> {
    let mut tape = Tape::new();
    let (a, b, c) = (tape.constant(x.clone()), tape.constant(w1.clone()), tape.constant(w2.clone()));
    let h = tape.linear(a, b)?;
    let h = tape.relu(h);
    let out = tape.linear(h, c)?;
    let l = tape.softmax_cross_entropy(out, labels)?;
    tape.value(l).item()
}

fn main() -> bitshare::Result<()> {
    let x = Tensor::<f64>::from_f64(&[4, 3], &[0.5, -1.0, 0.3, 1.2, 0.1, -0.4, -0.7, 0.9, 0.2, 0.0, 0.3, 1.5])?;
    let w1 = Tensor::<f64>::from_f64(&[5, 3], &[0.2, -0.1, 0.4, 0.3, 0.5, -0.2, -0.6, 0.1, 0.3, 0.2, 0.2, 0.2, 0.7, -0.3, 0.1])?;
    let w2 = Tensor::<f64>::from_f64(&[2, 5], &[0.1, -0.4, 0.3, 0.2, 0.5, -0.3, 0.2, 0.1, -0.1, 0.4])?;
    let labels = [0, 1, 1, 0];

    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let p1 = tape.param(w1.clone());
    let p2 = tape.param(w2.clone());
    let h = tape.linear(a, p1)?;
    let h = tape.relu(h);
    let out = tape.linear(h, p2)?;
    let l = tape.softmax_cross_entropy(out, &labels)?;
    let grads = tape.backward(l)?;
    println!("loss {:.6}", tape.value(l).item()?);
    let g1 = grads.get(p1).expect("w1 gradient");
    println!("dL/dW1 {:?}", g1.data());

    let h = 1e-6;
    let mut plus = w1.data().to_vec();
    plus[4] += h;
    let mut minus = w1.data().to_vec();
    minus[4] -= h;
    let lp = loss(&Tensor::from_f64(&[5, 3], &plus)?, &w2, &x, &labels)?;
    let lm = loss(&Tensor::from_f64(&[5, 3], &minus)?, &w2, &x, &labels)?;
    println!("W1[1,1]: analytic {:.8}, central difference {:.8}", g1.data()[4], (lp - lm) / (2.0 * h));
    Ok(())
}
