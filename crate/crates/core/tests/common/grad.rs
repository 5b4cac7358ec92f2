//! Central finite-difference checks for every tape primitive.

use bitshare::autodiff::{Tape, Tensor, Var};
use bitshare::idm::{idm_loss, HeadVars, IdmConfig};
use bitshare::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const POINTS: usize = 50;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Outcome of one op's check: worst relative error over all points.
#[derive(Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub worst: f64,
    pub tol: f64,
}

impl OpReport {
    pub fn ok(&self) -> bool {
        self.worst <= self.tol
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Values with magnitude in `[lo, hi]` and random sign, so nothing sits
/// near zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn eval(inputs: &[Tensor<f64>], weights: &Option<Tensor<f64>>, build: &Build, trainable: &[bool]) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(trainable)
        .map(|(t, &g)| tape.leaf(t.clone(), g))
        .collect();
    let out = build(&mut tape, &vars)?;
    let loss = match weights {
        Some(w) => {
            let c = tape.constant(w.clone());
            let p = tape.mul(out, c)?;
            tape.sum(p)
        }
        None => out,
    };
    Ok((tape, vars, loss))
}

/// Worst relative error between analytic and central-difference gradients
/// of `sum(r * build(inputs))` over the trainable inputs.
pub fn check(inputs: &[Tensor<f64>], trainable: &[bool], build: &Build, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tape, _, out) = eval(inputs, &None, build, trainable)?;
    let weights = if tape.value(out).numel() > 1 {
        Some(uniform(&mut rng, tape.shape(out), -1.0, 1.0))
    } else {
        None
    };
    let (tape, vars, loss) = eval(inputs, &weights, build, trainable)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        if !trainable[i] {
            continue;
        }
        let analytic = grads.get(vars[i]).expect("trainable input has a gradient");
        for j in 0..input.numel() {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[j] += H;
            let (tp, _, lp) = eval(&shifted, &weights, build, trainable)?;
            shifted[i].data_mut()[j] -= 2.0 * H;
            let (tm, _, lm) = eval(&shifted, &weights, build, trainable)?;
            let fd = (tp.value(lp).item()? - tm.value(lm).item()?) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[j], fd));
        }
    }
    Ok(worst)
}

fn run_op(
    op: &'static str,
    tol: f64,
    seed: u64,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Vec<bool>),
    build: &Build,
) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for p in 0..POINTS {
        let (inputs, trainable) = draw(&mut rng);
        worst = worst.max(check(&inputs, &trainable, build, seed * 1000 + p as u64)?);
    }
    Ok(OpReport { op, worst, tol })
}

fn small_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let s = small_shape(rng);
    uniform(rng, &s, lo, hi)
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..3)]
}

/// Resamples entries that fall within `margin` of any of `kinks`.
fn avoid(mut t: Tensor<f64>, kinks: &[f64], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    for v in t.data_mut() {
        while kinks.iter().any(|k| (*v - k).abs() < margin) {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    t
}

/// Fixed-residual STE surrogate of the fake quantizer: the rounding offset
/// `round(z) - z` is frozen at the evaluation point, so finite differences
/// of this smooth function give the straight-through derivatives.
pub fn ste_surrogate(x: f64, s: f64, residual: f64, lo: f64, hi: f64) -> f64 {
    s * (residual + (x / s).clamp(lo, hi))
}

/// Quantizer gradients against the STE surrogate oracle: input gradient
/// and step-size gradient including the `1/sqrt(numel * n_max)` factor.
pub fn quantize_check(seed: u64) -> Result<(OpReport, OpReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut wx, mut ws) = (0.0f64, 0.0f64);
    for _ in 0..POINTS {
        let bits: u8 = rng.random_range(2..7);
        let signed = rng.random_bool(0.5);
        let (lo, hi) = if signed {
            (-(1i32 << (bits - 1)) as f64, ((1i32 << (bits - 1)) - 1) as f64)
        } else {
            (0.0, ((1i32 << bits) - 1) as f64)
        };
        let s = rng.random_range(0.05..0.5);
        let n = rng.random_range(3..12);
        let mut xs = Vec::with_capacity(n);
        while xs.len() < n {
            let z: f64 = rng.random_range(lo - 3.0..hi + 3.0);
            let frac = z - z.floor();
            let near_tie = (frac - 0.5).abs() < 1e-3;
            let near_clip = (z - lo).abs() < 1e-3 || (z - hi).abs() < 1e-3;
            if !near_tie && !near_clip {
                xs.push(z * s);
            }
        }
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![n], xs.clone()).unwrap());
        let sv = tape.param(Tensor::scalar(s));
        let q = tape.quantize(x, sv, lo as i32, hi as i32)?;
        let uc = tape.constant(Tensor::new(vec![n], u.clone()).unwrap());
        let p = tape.mul(q, uc)?;
        let loss = tape.sum(p);
        let g = tape.backward(loss)?;
        let gx = g.get(x).unwrap().data().to_vec();
        let gs = g.get(sv).unwrap().data()[0];

        let residual: Vec<f64> = xs
            .iter()
            .map(|&xi| {
                let z = xi / s;
                if z < lo || z > hi {
                    0.0
                } else {
                    z.round() - z
                }
            })
            .collect();
        let f = |xs: &[f64], s: f64| -> f64 {
            xs.iter()
                .zip(&residual)
                .zip(&u)
                .map(|((&xi, &r), &ui)| ui * ste_surrogate(xi, s, r, lo, hi))
                .sum()
        };
        for j in 0..n {
            let mut a = xs.clone();
            a[j] += H;
            let mut b = xs.clone();
            b[j] -= H;
            wx = wx.max(rel_err(gx[j], (f(&a, s) - f(&b, s)) / (2.0 * H)));
        }
        let scale = 1.0 / ((n as f64) * hi).sqrt();
        let fd = (f(&xs, s + H) - f(&xs, s - H)) / (2.0 * H) * scale;
        ws = ws.max(rel_err(gs, fd));
    }
    Ok((
        OpReport { op: "quantize (input, STE)", worst: wx, tol: 1e-4 },
        OpReport { op: "quantize (step size, LSQ)", worst: ws, tol: 1e-3 },
    ))
}

/// Independent evaluation of the adapted branch used for kink avoidance.
fn adapted(o: &Tensor<f64>, eta: &[f64], xi: &[f64], eps: f64) -> Vec<f64> {
    let (n, c) = (o.shape()[0], o.shape()[1]);
    let inner: usize = o.shape()[2..].iter().product();
    let d = o.data();
    let mut out = vec![0.0; d.len()];
    for k in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|b| (0..inner).map(move |i| (b * c + k) * inner + i)).map(|i| d[i]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        for b in 0..n {
            for i in 0..inner {
                let idx = (b * c + k) * inner + i;
                out[idx] = (d[idx] - m) / (v + eps).sqrt() * eta[k] + xi[k];
            }
        }
    }
    out
}

/// Inputs for an alignment-loss check: `[o_s, o_h, eta_s, xi_s, eta_h, xi_h]`,
/// drawn so every element is clear of the rectifier and absolute-value kinks.
pub fn idm_point(rng: &mut ChaCha8Rng, cfg: &IdmConfig) -> Vec<Tensor<f64>> {
    loop {
        let shape = vec![rng.random_range(2..5), rng.random_range(1..4), rng.random_range(1..3)];
        let c = shape[1];
        let o_s = uniform(rng, &shape, -2.0, 2.0);
        let o_h = uniform(rng, &shape, -2.0, 2.0);
        let eta_s = uniform(rng, &[c], 0.5, 1.5);
        let xi_s = uniform(rng, &[c], -0.5, 0.5);
        let eta_h = uniform(rng, &[c], 0.5, 1.5);
        let xi_h = uniform(rng, &[c], -0.5, 0.5);
        let a = adapted(&o_s, eta_s.data(), xi_s.data(), cfg.eps_stab);
        let b = adapted(&o_h, eta_h.data(), xi_h.data(), cfg.eps_stab);
        let margin = 1e-2;
        let clear = a.iter().chain(&b).all(|v| (v - cfg.q).abs() > margin)
            && a.iter().zip(&b).all(|(x, y)| (x.max(cfg.q) - y.max(cfg.q)).abs() > margin || (x < &cfg.q && y < &cfg.q));
        if clear {
            return vec![o_s, o_h, eta_s, xi_s, eta_h, xi_h];
        }
    }
}

pub fn idm_build(cfg: IdmConfig) -> impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {
    move |t, v| {
        let head = HeadVars { eta_s: v[2], xi_s: v[3], eta_h: v[4], xi_h: v[5] };
        idm_loss(t, v[0], v[1], &head, &cfg)
    }
}

/// Runs every primitive's check.
pub fn all_checks() -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    let t = 1e-4;
    let both = vec![true, true];
    macro_rules! binary {
        ($name:expr, $seed:expr, $f:ident, $denom:expr) => {
            out.push(run_op(
                $name,
                t,
                $seed,
                |r| {
                    let s = small_shape(r);
                    let a = uniform(r, &s, -2.0, 2.0);
                    let b = if $denom { away_from_zero(r, &s, 0.5, 2.0) } else { uniform(r, &s, -2.0, 2.0) };
                    (vec![a, b], both.clone())
                },
                &|tp, v| tp.$f(v[0], v[1]),
            )?)
        };
    }
    binary!("add", 1, add, false);
    binary!("sub", 2, sub, false);
    binary!("mul", 3, mul, false);
    binary!("div", 4, div, true);

    let unary = |r: &mut ChaCha8Rng| (vec![small_uniform(r, -2.0, 2.0)], vec![true]);
    out.push(run_op("add_scalar", t, 5, unary, &|tp, v| Ok(tp.add_scalar(v[0], 0.7)))?);
    out.push(run_op("mul_scalar", t, 6, unary, &|tp, v| Ok(tp.mul_scalar(v[0], -1.3)))?);
    out.push(run_op("sum", t, 7, unary, &|tp, v| Ok(tp.sum(v[0])))?);
    out.push(run_op("mean", t, 8, unary, &|tp, v| Ok(tp.mean(v[0])))?);
    out.push(run_op("reshape", t, 9, unary, &|tp, v| {
        let n = tp.value(v[0]).numel();
        tp.reshape(v[0], vec![n])
    })?);
    out.push(run_op(
        "flatten",
        t,
        10,
        |r| (vec![uniform(r, &[2, 3, 2, 2], -2.0, 2.0)], vec![true]),
        &|tp, v| tp.flatten(v[0]),
    )?);
    out.push(run_op(
        "relu",
        t,
        11,
        |r| {
            let x = small_uniform(r, -2.0, 2.0);
            (vec![avoid(x, &[0.0], 1e-2, r)], vec![true])
        },
        &|tp, v| Ok(tp.relu(v[0])),
    )?);
    out.push(run_op(
        "max_scalar",
        t,
        12,
        |r| {
            let x = small_uniform(r, -2.0, 2.0);
            (vec![avoid(x, &[0.3], 1e-2, r)], vec![true])
        },
        &|tp, v| Ok(tp.max_scalar(v[0], 0.3)),
    )?);
    out.push(run_op(
        "abs",
        t,
        13,
        |r| {
            let x = small_uniform(r, -2.0, 2.0);
            (vec![avoid(x, &[0.0], 1e-2, r)], vec![true])
        },
        &|tp, v| Ok(tp.abs(v[0])),
    )?);
    out.push(run_op(
        "sqrt",
        t,
        14,
        |r| (vec![small_uniform(r, 0.2, 3.0)], vec![true]),
        &|tp, v| tp.sqrt(v[0]),
    )?);
    out.push(run_op(
        "matmul",
        t,
        15,
        |r| {
            let (m, k, n) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..4));
            (vec![uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[k, n], -1.0, 1.0)], vec![true, true])
        },
        &|tp, v| tp.matmul(v[0], v[1]),
    )?);
    out.push(run_op(
        "linear",
        t,
        16,
        |r| {
            let (n, i, o) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..4));
            (vec![uniform(r, &[n, i], -1.0, 1.0), uniform(r, &[o, i], -1.0, 1.0)], vec![true, true])
        },
        &|tp, v| tp.linear(v[0], v[1]),
    )?);
    macro_rules! channel {
        ($name:expr, $seed:expr, $f:ident, $denom:expr) => {
            out.push(run_op(
                $name,
                t,
                $seed,
                |r| {
                    let s = small_shape(r);
                    let x = uniform(r, &s, -2.0, 2.0);
                    let c = if $denom { away_from_zero(r, &[s[1]], 0.5, 2.0) } else { uniform(r, &[s[1]], -2.0, 2.0) };
                    (vec![x, c], vec![true, true])
                },
                &|tp, v| tp.$f(v[0], v[1]),
            )?)
        };
    }
    channel!("add_channel", 17, add_channel, false);
    channel!("sub_channel", 18, sub_channel, false);
    channel!("mul_channel", 19, mul_channel, false);
    channel!("div_channel", 20, div_channel, true);
    let batchy = |r: &mut ChaCha8Rng| {
        let s = vec![r.random_range(2..4), r.random_range(1..4), r.random_range(1..3)];
        (vec![uniform(r, &s, -2.0, 2.0)], vec![true])
    };
    out.push(run_op("channel_mean", t, 21, batchy, &|tp, v| tp.channel_mean(v[0]))?);
    out.push(run_op("channel_var", t, 22, batchy, &|tp, v| tp.channel_var(v[0]))?);
    out.push(run_op(
        "conv2d",
        t,
        23,
        |r| {
            let (n, c, hw, oc, k) = (r.random_range(1..3), r.random_range(1..3), r.random_range(3..6), r.random_range(1..3), r.random_range(1..4));
            (
                vec![uniform(r, &[n, c, hw, hw], -1.0, 1.0), uniform(r, &[oc, c, k, k], -1.0, 1.0)],
                vec![true, true],
            )
        },
        &|tp, v| {
            let k = tp.shape(v[1])[2];
            let stride = 1 + (k % 2);
            tp.conv2d(v[0], v[1], stride, 1)
        },
    )?);
    let bn_draw = |r: &mut ChaCha8Rng| {
        let s = vec![r.random_range(2..5), r.random_range(1..4), r.random_range(1..3)];
        let c = s[1];
        (
            vec![uniform(r, &s, -2.0, 2.0), uniform(r, &[c], 0.5, 1.5), uniform(r, &[c], -0.5, 0.5)],
            vec![true, true, true],
        )
    };
    out.push(run_op("batch_norm (batch stats)", t, 24, bn_draw, &|tp, v| {
        Ok(tp.batch_norm(v[0], v[1], v[2], 1e-5, None)?.0)
    })?);
    out.push(run_op("batch_norm (running stats)", t, 25, bn_draw, &|tp, v| {
        let c = tp.shape(v[1])[0];
        let mean: Vec<f64> = (0..c).map(|k| 0.1 * k as f64).collect();
        let var: Vec<f64> = (0..c).map(|k| 0.5 + 0.2 * k as f64).collect();
        Ok(tp.batch_norm(v[0], v[1], v[2], 1e-5, Some((&mean, &var)))?.0)
    })?);
    out.push(run_op(
        "softmax_cross_entropy",
        t,
        26,
        |r| {
            let s = [r.random_range(1..5), r.random_range(2..6)];
            (vec![uniform(r, &s, -3.0, 3.0)], vec![true])
        },
        &|tp, v| {
            let s = tp.shape(v[0]).to_vec();
            let labels: Vec<usize> = (0..s[0]).map(|i| (i * 7 + 3) % s[1]).collect();
            tp.softmax_cross_entropy(v[0], &labels)
        },
    )?);
        out.push(run_op(
        "ste_round",
        t,
        27,
        |r| (vec![small_uniform(r, -3.0, 3.0)], vec![true]),
        &|tp, v| {
            let r = tp.ste_round(v[0]);
            // Value of r - (round(x) - x) is x itself; its analytic gradient
            // flows only through the straight-through path.
            let mut offset = tp.value(r).clone();
            for (o, xi) in offset.data_mut().iter_mut().zip(tp.value(v[0]).data()) {
                *o -= xi;
            }
            let c = tp.constant(offset);
            tp.sub(r, c)
        },
    )?);
    let (qx, qs) = quantize_check(28)?;
    out.push(qx);
    out.push(qs);
    let cfg = IdmConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let build = idm_build(cfg.clone());
    let mut worst = 0.0f64;
    for p in 0..POINTS {
        let inputs = idm_point(&mut rng, &cfg);
        let trainable = vec![true, false, true, true, true, true];
        worst = worst.max(check(&inputs, &trainable, &build, 2900 + p as u64)?);
    }
    out.push(OpReport { op: "idm_loss", worst, tol: 1e-3 });
    Ok(out)
}
