use super::tensor::Element;

/// Strided matrix view `(data, row_stride, col_stride)`.
pub(crate) type View<'a, T> = (&'a [T], isize, isize);

/// `c = a @ b + beta * c` for an `m x k` by `k x n` product.
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: (&mut [T], isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(max_offset(m, k, a.1, a.2) < a.0.len().max(1));
    debug_assert!(max_offset(k, n, b.1, b.2) < b.0.len().max(1));
    debug_assert!(max_offset(m, n, c.1, c.2) < c.0.len());
    // SAFETY: the debug assertions above hold for every call site; each view
    // is built from the dimensions of the tensor it borrows.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            c.2,
        )
    }
}

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        let (ph, pw) = (in_h + 2 * padding, in_w + 2 * padding);
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            return None;
        }
        Some(ConvGeom {
            in_channels,
            in_h,
            in_w,
            out_channels,
            kh,
            kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn patch(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one sample `[C, H, W]` into `[C*KH*KW, OH*OW]`.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.in_channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        dst[oi * g.out_w + oj] = if ii >= 0
                            && jj >= 0
                            && (ii as usize) < g.in_h
                            && (jj as usize) < g.in_w
                        {
                            x[(c * g.in_h + ii as usize) * g.in_w + jj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.in_channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii as usize >= g.in_h {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj < 0 || jj as usize >= g.in_w {
                            continue;
                        }
                        let idx = (c * g.in_h + ii as usize) * g.in_w + jj as usize;
                        dx[idx] = dx[idx] + src[oi * g.out_w + oj];
                    }
                }
            }
        }
    }
}

/// Returns the output `[N, OC, OH, OW]` and the unfolded inputs kept for backward.
pub(crate) fn conv2d_forward<T: Element>(x: &[T], w: &[T], n: usize, g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let (patch, p) = (g.patch(), g.positions());
    let in_size = g.in_channels * g.in_h * g.in_w;
    let out_size = g.out_channels * p;
    let mut cols = vec![T::zero(); n * patch * p];
    let mut out = vec![T::zero(); n * out_size];
    for b in 0..n {
        let col = &mut cols[b * patch * p..(b + 1) * patch * p];
        im2col(&x[b * in_size..(b + 1) * in_size], g, col);
        gemm(
            g.out_channels,
            patch,
            p,
            (w, patch as isize, 1),
            (col, p as isize, 1),
            T::zero(),
            (&mut out[b * out_size..(b + 1) * out_size], p as isize, 1),
        );
    }
    (out, cols)
}

pub(crate) fn conv2d_backward<T: Element>(
    gout: &[T],
    w: &[T],
    cols: &[T],
    n: usize,
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (patch, p) = (g.patch(), g.positions());
    let in_size = g.in_channels * g.in_h * g.in_w;
    let out_size = g.out_channels * p;
    let mut dw = want_dw.then(|| vec![T::zero(); g.out_channels * patch]);
    let mut dx = want_dx.then(|| vec![T::zero(); n * in_size]);
    let mut dcols = if want_dx { vec![T::zero(); patch * p] } else { Vec::new() };
    for b in 0..n {
        let go = &gout[b * out_size..(b + 1) * out_size];
        let col = &cols[b * patch * p..(b + 1) * patch * p];
        if let Some(dw) = dw.as_mut() {
            // dW += dOut @ cols^T
            gemm(
                g.out_channels,
                p,
                patch,
                (go, p as isize, 1),
                (col, 1, p as isize),
                T::one(),
                (dw, patch as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T @ dOut
            gemm(
                patch,
                g.out_channels,
                p,
                (w, 1, patch as isize),
                (go, p as isize, 1),
                T::zero(),
                (&mut dcols, p as isize, 1),
            );
            col2im(&dcols, g, &mut dx[b * in_size..(b + 1) * in_size]);
        }
    }
    (dx, dw)
}

/// Per-channel mean and biased variance of `[N, C, inner]`, accumulated in f64.
pub(crate) fn channel_moments<T: Element>(x: &[T], n: usize, ch: usize, inner: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * inner).max(1) as f64;
    let mut mean = vec![0.0f64; ch];
    for b in 0..n {
        for (k, mk) in mean.iter_mut().enumerate() {
            let base = (b * ch + k) * inner;
            *mk += x[base..base + inner].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0f64; ch];
    for b in 0..n {
        for (k, vk) in var.iter_mut().enumerate() {
            let base = (b * ch + k) * inner;
            *vk += x[base..base + inner]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean[k];
                    d * d
                })
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

/// `round(clip(x / s, lo, hi)) * s`, rounding half away from zero.
#[inline]
pub(crate) fn fake_quant<T: Element>(x: T, s: T, lo: T, hi: T) -> T {
    let z = x / s;
    let level = if z < lo {
        lo
    } else if z > hi {
        hi
    } else {
        z.round()
    };
    level * s
}

/// Derivative of [`fake_quant`] with respect to `s` under the
/// straight-through rounding convention.
#[inline]
pub(crate) fn fake_quant_scale_grad<T: Element>(x: T, s: T, lo: T, hi: T) -> T {
    let z = x / s;
    if z < lo {
        lo
    } else if z > hi {
        hi
    } else {
        z.round() - z
    }
}
