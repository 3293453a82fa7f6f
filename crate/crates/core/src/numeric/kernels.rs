//! Forward and backward array kernels. Pure functions over slices; the tape
//! in `ops` wires them into the autodiff graph.

use crate::scalar::Scalar;

/// `a[m,k] · b[k,n]`, with either operand optionally read transposed from
/// its row-major storage.
pub fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_into(a, b, m, k, n, trans_a, trans_b, T::zero(), &mut c);
    c
}

/// `c = a·b + beta·c` (see [`matmul`]).
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

/// Column sums of a `[rows, cols]` matrix.
pub fn col_sum<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in x.chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

pub fn add_row_bias<T: Scalar>(y: &mut [T], bias: &[T]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

// ---------------------------------------------------------------------------
// convolution

/// Square kernel geometry for channels-last 2-D convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    pub fn conv_out(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn transposed_out(&self, size: usize) -> Option<usize> {
        ((size - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }
}

/// Gathers `[h,w,c]` into `[ho*wo, k*k*c]` patch rows ordered `(ky, kx, c)`.
pub fn im2col<T: Scalar>(
    x: &[T],
    (h, w, c): (usize, usize, usize),
    g: ConvGeom,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let k = g.kernel;
    let row_len = k * k * c;
    let mut cols = vec![T::zero(); ho * wo * row_len];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * row_len..][..row_len];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = (ky * k + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into `[h,w,c]`.
pub fn col2im<T: Scalar>(
    cols: &[T],
    (h, w, c): (usize, usize, usize),
    g: ConvGeom,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let k = g.kernel;
    let row_len = k * k * c;
    let mut x = vec![T::zero(); h * w * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * row_len..][..row_len];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = (ky * k + kx) * c;
                    for (o, &v) in x[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                        *o += v;
                    }
                }
            }
        }
    }
    x
}

// ---------------------------------------------------------------------------
// normalisation and activations

/// Per-row mean and reciprocal standard deviation over the last axis.
pub fn layer_norm_stats<T: Scalar>(x: &[T], d: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = T::lit(d as f64);
    let rows = x.len() / d;
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for row in x.chunks_exact(d) {
        let mu = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        mean.push(mu);
        rstd.push(T::one() / (var + eps).sqrt());
    }
    (mean, rstd)
}

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax_rows<T: Scalar>(x: &mut [T], d: usize) {
    for row in x.chunks_exact_mut(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// Gradient through a row softmax given its output `y`.
pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], d: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), out) in y
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// attention

/// Softmax attention over `heads` heads for `[n, d]` query/key/value
/// matrices. Returns the `[n, d]` output and the per-head `[n, n]`
/// probability matrices needed by the backward pass.
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut probs = vec![T::zero(); heads * n * n];
    let mut out = vec![T::zero(); n * d];
    let di = d as isize;
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        // S = scale * Q_h K_h^T
        T::gemm(
            n, dh, n, scale, &q[off..], di, 1, &k[off..], 1, di, T::zero(), p, n as isize, 1,
        );
        softmax_rows(p, n);
        // O_h = P V_h
        T::gemm(
            n, n, dh, T::one(), p, n as isize, 1, &v[off..], di, 1, T::zero(),
            &mut out[off..], di, 1,
        );
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let di = d as isize;
    let ni = n as isize;
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut dp = vec![T::zero(); n * n];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * n * n..(h + 1) * n * n];
        // dV_h = P^T dO_h
        T::gemm(
            n, n, dh, T::one(), p, 1, ni, &dout[off..], di, 1, T::zero(), &mut dv[off..], di, 1,
        );
        // dP = dO_h V_h^T
        T::gemm(
            n, dh, n, T::one(), &dout[off..], di, 1, &v[off..], 1, di, T::zero(), &mut dp, ni, 1,
        );
        let ds = softmax_rows_backward(p, &dp, n);
        // dQ_h = scale * dS K_h
        T::gemm(
            n, n, dh, scale, &ds, ni, 1, &k[off..], di, 1, T::zero(), &mut dq[off..], di, 1,
        );
        // dK_h = scale * dS^T Q_h
        T::gemm(
            n, n, dh, scale, &ds, 1, ni, &q[off..], di, 1, T::zero(), &mut dk[off..], di, 1,
        );
    }
    (dq, dk, dv)
}

// ---------------------------------------------------------------------------
// bilinear resize

/// One-axis sampling plan for half-pixel-centred bilinear resampling
/// (`align_corners = false`).
#[derive(Clone, Debug)]
pub struct AxisInterp<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<T>,
}

impl<T: Scalar> AxisInterp<T> {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(T::lit(src - i0 as f64));
        }
        Self { lo, hi, frac }
    }
}

pub fn resize_forward<T: Scalar>(
    x: &[T],
    (h, w, c): (usize, usize, usize),
    ay: &AxisInterp<T>,
    ax: &AxisInterp<T>,
) -> Vec<T> {
    let (oh, ow) = (ay.lo.len(), ax.lo.len());
    let mut out = vec![T::zero(); oh * ow * c];
    debug_assert_eq!(x.len(), h * w * c);
    for oy in 0..oh {
        let (y0, y1, ly) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
        for ox in 0..ow {
            let (x0, x1, lx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
            let w00 = (T::one() - ly) * (T::one() - lx);
            let w01 = (T::one() - ly) * lx;
            let w10 = ly * (T::one() - lx);
            let w11 = ly * lx;
            let dst = &mut out[(oy * ow + ox) * c..][..c];
            let p00 = &x[(y0 * w + x0) * c..][..c];
            let p01 = &x[(y0 * w + x1) * c..][..c];
            let p10 = &x[(y1 * w + x0) * c..][..c];
            let p11 = &x[(y1 * w + x1) * c..][..c];
            for i in 0..c {
                dst[i] = w00 * p00[i] + w01 * p01[i] + w10 * p10[i] + w11 * p11[i];
            }
        }
    }
    out
}

pub fn resize_backward<T: Scalar>(
    dout: &[T],
    (h, w, c): (usize, usize, usize),
    ay: &AxisInterp<T>,
    ax: &AxisInterp<T>,
) -> Vec<T> {
    let (oh, ow) = (ay.lo.len(), ax.lo.len());
    let mut dx = vec![T::zero(); h * w * c];
    for oy in 0..oh {
        let (y0, y1, ly) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
        for ox in 0..ow {
            let (x0, x1, lx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
            let weights = [
                ((y0 * w + x0) * c, (T::one() - ly) * (T::one() - lx)),
                ((y0 * w + x1) * c, (T::one() - ly) * lx),
                ((y1 * w + x0) * c, ly * (T::one() - lx)),
                ((y1 * w + x1) * c, ly * lx),
            ];
            let g = &dout[(oy * ow + ox) * c..][..c];
            for (base, wt) in weights {
                if wt == T::zero() {
                    continue;
                }
                for (o, &gv) in dx[base..base + c].iter_mut().zip(g) {
                    *o += wt * gv;
                }
            }
        }
    }
    dx
}
