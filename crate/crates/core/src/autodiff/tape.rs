//! Define-by-run reverse-mode tape.
//!
//! Every primitive appends one node holding its forward value and whatever
//! it needs for the backward rule. Nodes are only ever appended, so the node
//! vector is already in topological order and [`Tape::backward`] is a single
//! reverse sweep.

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum ChannelOp {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Relu(Var),
    MaxScalar(Var, T),
    Abs(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
    },
    Channel {
        x: Var,
        c: Var,
        op: ChannelOp,
    },
    ChannelMean(Var),
    ChannelVar {
        x: Var,
        mean: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SteRound(Var),
    Quantize {
        x: Var,
        scale: Var,
        n_min: T,
        n_max: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Batch statistics produced by a training-mode batch-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient (inputs, detached targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.zip_map(a, b, |x, y| x / y);
        Ok(self.push(out, &[a, b], Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, &[x], Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, &[x], Op::MulScalar(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, &[x], Op::Relu(x))
    }

    /// Elementwise `max(x, floor)`.
    pub fn max_scalar(&mut self, x: Var, floor: T) -> Var {
        let out = self.value(x).map(|v| v.max(floor));
        self.push(out, &[x], Op::MaxScalar(x, floor))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, &[x], Op::Abs(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid("sqrt of a negative value"));
        }
        let out = self.value(x).map(|v| v.sqrt());
        Ok(self.push(out, &[x], Op::Sqrt(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(s)), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.data().iter().map(|v| v.as_f64()).sum();
        let m = s / v.numel().max(1) as f64;
        self.push(Tensor::scalar(T::from_f64(m)), &[x], Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, &[x], Op::Reshape(x)))
    }

    /// `[N, ...] -> [N, prod(...)]`
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::shape("flatten", "scalar input"));
        }
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, vec![shape[0], rest])
    }

    /// `[m, k] @ [k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            m,
            k,
            n,
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), n as isize, 1),
            T::zero(),
            (&mut out, n as isize, 1),
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), &[a, b], Op::MatMul(a, b)))
    }

    /// Fully-connected product `x @ w^T` with `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", format!("x {sx:?}, w {sw:?}")));
        }
        let (n, din, dout) = (sx[0], sx[1], sw[0]);
        let mut out = vec![T::zero(); n * dout];
        kernels::gemm(
            n,
            din,
            dout,
            (self.value(x).data(), din as isize, 1),
            (self.value(w).data(), 1, din as isize),
            T::zero(),
            (&mut out, dout as isize, 1),
        );
        Ok(self.push(
            Tensor::from_parts(vec![n, dout], out),
            &[x, w],
            Op::Linear { x, w },
        ))
    }

    fn channel_op(&mut self, x: Var, c: Var, op: ChannelOp) -> Result<Var> {
        let name = match op {
            ChannelOp::Add => "add_channel",
            ChannelOp::Sub => "sub_channel",
            ChannelOp::Mul => "mul_channel",
            ChannelOp::Div => "div_channel",
        };
        let xv = self.value(x);
        let Some((n, ch, inner)) = xv.channel_layout() else {
            return Err(Error::shape(name, format!("x {:?} has no channel axis", xv.shape())));
        };
        let cv = self.value(c);
        if cv.numel() != ch {
            return Err(Error::shape(
                name,
                format!("x {:?}, per-channel {:?}", xv.shape(), cv.shape()),
            ));
        }
        let cd = cv.data();
        let mut out = xv.data().to_vec();
        for b in 0..n {
            for (k, &cval) in cd.iter().enumerate() {
                let base = (b * ch + k) * inner;
                for v in &mut out[base..base + inner] {
                    *v = match op {
                        ChannelOp::Add => *v + cval,
                        ChannelOp::Sub => *v - cval,
                        ChannelOp::Mul => *v * cval,
                        ChannelOp::Div => *v / cval,
                    };
                }
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(out, &[x, c], Op::Channel { x, c, op }))
    }

    /// Adds a `[C]` vector along axis 1.
    pub fn add_channel(&mut self, x: Var, c: Var) -> Result<Var> {
        self.channel_op(x, c, ChannelOp::Add)
    }

    pub fn sub_channel(&mut self, x: Var, c: Var) -> Result<Var> {
        self.channel_op(x, c, ChannelOp::Sub)
    }

    pub fn mul_channel(&mut self, x: Var, c: Var) -> Result<Var> {
        self.channel_op(x, c, ChannelOp::Mul)
    }

    pub fn div_channel(&mut self, x: Var, c: Var) -> Result<Var> {
        self.channel_op(x, c, ChannelOp::Div)
    }

    fn channel_moments(&self, op: &'static str, x: Var) -> Result<(Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let Some((n, ch, inner)) = xv.channel_layout() else {
            return Err(Error::shape(op, format!("{:?} has no channel axis", xv.shape())));
        };
        Ok(kernels::channel_moments(xv.data(), n, ch, inner))
    }

    /// Per-channel mean over batch and spatial positions: `[N, C, ...] -> [C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (mean, _) = self.channel_moments("channel_mean", x)?;
        let out = Tensor::from_parts(vec![mean.len()], mean.iter().map(|&m| T::from_f64(m)).collect());
        Ok(self.push(out, &[x], Op::ChannelMean(x)))
    }

    /// Per-channel (biased) variance: `[N, C, ...] -> [C]`.
    pub fn channel_var(&mut self, x: Var) -> Result<Var> {
        let (mean, var) = self.channel_moments("channel_var", x)?;
        let out = Tensor::from_parts(vec![var.len()], var.iter().map(|&v| T::from_f64(v)).collect());
        let mean = mean.iter().map(|&m| T::from_f64(m)).collect();
        Ok(self.push(out, &[x], Op::ChannelVar { x, mean }))
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [OC, C, KH, KW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("x {sx:?}, w {sw:?}, stride {stride}"),
            ));
        }
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], stride, padding)
            .ok_or_else(|| {
                Error::shape("conv2d", format!("kernel {sw:?} does not fit input {sx:?}"))
            })?;
        let n = sx[0];
        let (out, cols) = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), n, &geom);
        let out = Tensor::from_parts(vec![n, geom.out_channels, geom.out_h, geom.out_w], out);
        Ok(self.push(out, &[x, w], Op::Conv2d { x, w, geom, cols }))
    }

    /// Batch normalization over axis 1 with affine `gamma`, `beta`.
    ///
    /// With `running = None` the batch's own statistics are used and returned;
    /// otherwise the supplied `(mean, var)` normalize the input.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let Some((n, ch, inner)) = xv.channel_layout() else {
            return Err(Error::shape("batch_norm", format!("{:?} has no channel axis", xv.shape())));
        };
        if self.value(gamma).numel() != ch || self.value(beta).numel() != ch {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    xv.shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let (mean, var, stats) = match running {
            None => {
                let (m, v) = kernels::channel_moments(xv.data(), n, ch, inner);
                (m.clone(), v.clone(), Some(BatchStats { mean: m, var: v }))
            }
            Some((rm, rv)) => {
                if rm.len() != ch || rv.len() != ch {
                    return Err(Error::shape("batch_norm", "running stats length"));
                }
                (
                    rm.iter().map(|v| v.as_f64()).collect(),
                    rv.iter().map(|v| v.as_f64()).collect(),
                    None,
                )
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut out = vec![T::zero(); xv.numel()];
        let xd = xv.data();
        for b in 0..n {
            for k in 0..ch {
                let base = (b * ch + k) * inner;
                let mu = T::from_f64(mean[k]);
                for i in base..base + inner {
                    let h = (xd[i] - mu) * inv_std[k];
                    xhat[i] = h;
                    out[i] = g[k] * h + bt[k];
                }
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let var_out = self.push(
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
        );
        Ok((var_out, stats))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?}, {} labels", labels.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = 0.0f64;
        for (row, &label) in labels.iter().enumerate() {
            let z = &lv.data()[row * k..(row + 1) * k];
            let max = z.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = z.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let log_denom = denom.ln() + max;
            total += log_denom - z[label].as_f64();
            for j in 0..k {
                probs[row * k + j] = T::from_f64((z[j].as_f64() - log_denom).exp());
            }
        }
        let loss = Tensor::scalar(T::from_f64(total / n.max(1) as f64));
        Ok(self.push(
            loss,
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Round to nearest (ties away from zero) with an identity backward.
    pub fn ste_round(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.round());
        self.push(out, &[x], Op::SteRound(x))
    }

    /// Fake-quantization `round(clip(x / s, n_min, n_max)) * s` with a
    /// straight-through input gradient and a step-size gradient scaled by
    /// `1 / sqrt(numel * n_max)`.
    pub fn quantize(&mut self, x: Var, scale: Var, n_min: i32, n_max: i32) -> Result<Var> {
        let sv = self.value(scale);
        if sv.numel() != 1 {
            return Err(Error::shape("quantize", format!("scale {:?} is not a scalar", sv.shape())));
        }
        let s = sv.data()[0];
        if !(s > T::zero()) {
            return Err(Error::invalid(format!("quantizer scale must be positive, got {s:?}")));
        }
        let (lo, hi) = (T::from_f64(n_min as f64), T::from_f64(n_max as f64));
        let out = self.value(x).map(|v| kernels::fake_quant(v, s, lo, hi));
        Ok(self.push(
            out,
            &[x, scale],
            Op::Quantize {
                x,
                scale,
                n_min: lo,
                n_max: hi,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of every
    /// `requires_grad` leaf are returned; shared subexpressions accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v))?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = self.grad_zip(g, self.value(*b), |gi, bi| gi * bi);
                    self.accumulate(grads, *a, ga)?;
                }
                if self.needs(*b) {
                    let gb = self.grad_zip(g, self.value(*a), |gi, ai| gi * ai);
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.needs(*a) {
                    let ga = self.grad_zip(g, bv, |gi, bi| gi / bi);
                    self.accumulate(grads, *a, ga)?;
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let data = gd
                        .iter()
                        .zip(bv.data())
                        .zip(av)
                        .map(|((&gi, &bi), &ai)| -gi * ai / (bi * bi))
                        .collect();
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), data))?;
                }
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone())?,
            Op::MulScalar(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s))?
            }
            Op::Relu(x) => {
                let gx = self.grad_zip(g, self.value(*x), |gi, xi| if xi > T::zero() { gi } else { T::zero() });
                self.accumulate(grads, *x, gx)?;
            }
            Op::MaxScalar(x, floor) => {
                let floor = *floor;
                let gx = self.grad_zip(g, self.value(*x), |gi, xi| if xi > floor { gi } else { T::zero() });
                self.accumulate(grads, *x, gx)?;
            }
            Op::Abs(x) => {
                let gx = self.grad_zip(g, self.value(*x), |gi, xi| {
                    if xi > T::zero() {
                        gi
                    } else if xi < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, gx)?;
            }
            Op::Sqrt(x) => {
                let gx = self.grad_zip(g, &node.value, |gi, yi| {
                    if yi > T::zero() {
                        gi / (yi + yi)
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, gx)?;
            }
            Op::Sum(x) => {
                let shape = self.shape(*x);
                self.accumulate(grads, *x, Tensor::full(shape, gd[0]))?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let scale = gd[0] / T::from_f64(xv.numel().max(1) as f64);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), scale))?;
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x).to_vec())?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    // dA = G @ B^T
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm(
                        m,
                        n,
                        k,
                        (gd, n as isize, 1),
                        (self.value(*b).data(), 1, n as isize),
                        T::zero(),
                        (&mut da, k as isize, 1),
                    );
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da))?;
                }
                if self.needs(*b) {
                    // dB = A^T @ G
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm(
                        k,
                        m,
                        n,
                        (self.value(*a).data(), 1, k as isize),
                        (gd, n as isize, 1),
                        T::zero(),
                        (&mut db, n as isize, 1),
                    );
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db))?;
                }
            }
            Op::Linear { x, w } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, din, dout) = (sx[0], sx[1], sw[0]);
                if self.needs(*x) {
                    // dX = G @ W
                    let mut dx = vec![T::zero(); n * din];
                    kernels::gemm(
                        n,
                        dout,
                        din,
                        (gd, dout as isize, 1),
                        (self.value(*w).data(), din as isize, 1),
                        T::zero(),
                        (&mut dx, din as isize, 1),
                    );
                    self.accumulate(grads, *x, Tensor::from_parts(vec![n, din], dx))?;
                }
                if self.needs(*w) {
                    // dW = G^T @ X
                    let mut dw = vec![T::zero(); dout * din];
                    kernels::gemm(
                        dout,
                        n,
                        din,
                        (gd, 1, dout as isize),
                        (self.value(*x).data(), din as isize, 1),
                        T::zero(),
                        (&mut dw, din as isize, 1),
                    );
                    self.accumulate(grads, *w, Tensor::from_parts(vec![dout, din], dw))?;
                }
            }
            Op::Channel { x, c, op } => self.channel_backward(*x, *c, *op, g, grads)?,
            Op::ChannelMean(x) => {
                let xv = self.value(*x);
                let (n, ch, inner) = xv.channel_layout().expect("checked in forward");
                let m = T::from_f64((n * inner) as f64);
                let mut dx = vec![T::zero(); xv.numel()];
                for b in 0..n {
                    for k in 0..ch {
                        let base = (b * ch + k) * inner;
                        let v = gd[k] / m;
                        dx[base..base + inner].iter_mut().for_each(|d| *d = v);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx))?;
            }
            Op::ChannelVar { x, mean } => {
                let xv = self.value(*x);
                let (n, ch, inner) = xv.channel_layout().expect("checked in forward");
                let two_over_m = T::from_f64(2.0 / (n * inner) as f64);
                let xd = xv.data();
                let mut dx = vec![T::zero(); xv.numel()];
                for b in 0..n {
                    for k in 0..ch {
                        let base = (b * ch + k) * inner;
                        for i in base..base + inner {
                            dx[i] = gd[k] * two_over_m * (xd[i] - mean[k]);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx))?;
            }
            Op::Conv2d { x, w, geom, cols } => {
                let n = self.shape(*x)[0];
                let (dx, dw) = kernels::conv2d_backward(
                    gd,
                    self.value(*w).data(),
                    cols,
                    n,
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), dx))?;
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::from_parts(self.shape(*w).to_vec(), dw))?;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xv = self.value(*x);
                let (n, ch, inner) = xv.channel_layout().expect("checked in forward");
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; ch];
                let mut dbeta = vec![0.0f64; ch];
                for b in 0..n {
                    for k in 0..ch {
                        let base = (b * ch + k) * inner;
                        for i in base..base + inner {
                            dbeta[k] += gd[i].as_f64();
                            dgamma[k] += (gd[i] * xhat[i]).as_f64();
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); xv.numel()];
                    let m = (n * inner) as f64;
                    for k in 0..ch {
                        let gk = gam[k];
                        // sums of dxhat and dxhat * xhat
                        let s1 = dbeta[k] * gk.as_f64();
                        let s2 = dgamma[k] * gk.as_f64();
                        for b in 0..n {
                            let base = (b * ch + k) * inner;
                            for i in base..base + inner {
                                let dxhat = gd[i] * gk;
                                dx[i] = if *batch_stats {
                                    inv_std[k]
                                        * T::from_f64(
                                            dxhat.as_f64() - s1 / m - xhat[i].as_f64() * s2 / m,
                                        )
                                } else {
                                    dxhat * inv_std[k]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx))?;
                }
                if self.needs(*gamma) {
                    let t = Tensor::from_parts(vec![ch], dgamma.iter().map(|&v| T::from_f64(v)).collect());
                    self.accumulate(grads, *gamma, t)?;
                }
                if self.needs(*beta) {
                    let t = Tensor::from_parts(vec![ch], dbeta.iter().map(|&v| T::from_f64(v)).collect());
                    self.accumulate(grads, *beta, t)?;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let s = self.shape(*logits);
                let (n, k) = (s[0], s[1]);
                let scale = gd[0] / T::from_f64(n as f64);
                let mut dl = probs.clone();
                for (row, &label) in labels.iter().enumerate() {
                    dl[row * k + label] = dl[row * k + label] - T::one();
                }
                dl.iter_mut().for_each(|v| *v = *v * scale);
                self.accumulate(grads, *logits, Tensor::from_parts(vec![n, k], dl))?;
            }
            Op::SteRound(x) => self.accumulate(grads, *x, g.clone())?,
            Op::Quantize {
                x,
                scale,
                n_min,
                n_max,
            } => {
                let xv = self.value(*x);
                let s = self.value(*scale).data()[0];
                let (lo, hi) = (*n_min, *n_max);
                if self.needs(*x) {
                    let gx = self.grad_zip(g, xv, |gi, xi| {
                        let z = xi / s;
                        if z >= lo && z <= hi {
                            gi
                        } else {
                            T::zero()
                        }
                    });
                    self.accumulate(grads, *x, gx)?;
                }
                if self.needs(*scale) {
                    let mut acc = 0.0f64;
                    for (&gi, &xi) in gd.iter().zip(xv.data()) {
                        acc += gi.as_f64() * kernels::fake_quant_scale_grad(xi, s, lo, hi).as_f64();
                    }
                    let gscale = 1.0 / ((xv.numel() as f64) * hi.as_f64()).sqrt();
                    self.accumulate(grads, *scale, Tensor::scalar(T::from_f64(acc * gscale)))?;
                }
            }
        }
        Ok(())
    }

    fn grad_zip(&self, g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Tensor::from_parts(g.shape().to_vec(), data)
    }

    fn channel_backward(
        &self,
        x: Var,
        c: Var,
        op: ChannelOp,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xv = self.value(x);
        let cv = self.value(c);
        let (n, ch, inner) = xv.channel_layout().expect("checked in forward");
        let (gd, xd, cd) = (g.data(), xv.data(), cv.data());
        if self.needs(x) {
            let dx = match op {
                ChannelOp::Add | ChannelOp::Sub => g.clone(),
                ChannelOp::Mul | ChannelOp::Div => {
                    let mut dx = gd.to_vec();
                    for b in 0..n {
                        for k in 0..ch {
                            let base = (b * ch + k) * inner;
                            for v in &mut dx[base..base + inner] {
                                *v = match op {
                                    ChannelOp::Mul => *v * cd[k],
                                    _ => *v / cd[k],
                                };
                            }
                        }
                    }
                    Tensor::from_parts(xv.shape().to_vec(), dx)
                }
            };
            self.accumulate(grads, x, dx)?;
        }
        if self.needs(c) {
            let mut dc = vec![0.0f64; ch];
            for b in 0..n {
                for k in 0..ch {
                    let base = (b * ch + k) * inner;
                    for i in base..base + inner {
                        dc[k] += match op {
                            ChannelOp::Add => gd[i].as_f64(),
                            ChannelOp::Sub => -gd[i].as_f64(),
                            ChannelOp::Mul => (gd[i] * xd[i]).as_f64(),
                            ChannelOp::Div => (-gd[i] * xd[i] / (cd[k] * cd[k])).as_f64(),
                        };
                    }
                }
            }
            let t = Tensor::from_parts(cv.shape().to_vec(), dc.iter().map(|&v| T::from_f64(v)).collect());
            self.accumulate(grads, c, t)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn scalar_matmul() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 1], &[3.0]));
        let b = tape.constant(t(&[1, 1], &[4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[12.0]);
    }

    #[test]
    fn conv_with_ones_kernel_sums_input() {
        let mut tape = Tape::<f64>::new();
        let vals: Vec<f64> = (1..=9).map(|v| v as f64 * 0.5).collect();
        let x = tape.constant(t(&[1, 1, 3, 3], &vals));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data()[0], vals.iter().sum::<f64>());
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn ste_round_ties_and_identity_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.4, 0.0, -1.5]));
        let y = tape.ste_round(x);
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, -2.0]);
        let w = tape.constant(t(&[3], &[0.7, -0.2, 3.0]));
        let prod = tape.mul(y, w).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.7, -0.2, 3.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(w, w).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn reused_var_accumulates() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::scalar(2.0));
        let a = tape.mul_scalar(w, 3.0);
        let b = tape.mul(w, w).unwrap();
        let loss = tape.add(a, b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0 + 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let p = tape.mul(w, c).unwrap();
        let grads = tape.backward(p).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[5.0]);
    }
}
