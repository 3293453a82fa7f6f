//! Differentiable operations recorded on a [`Tape`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::kernels::{self, AxisInterp, ConvGeom};
use crate::numeric::{Tape, Tensor, Var};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-6;

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn hwc<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    expect_rank(op, t, 3)?;
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y).map_err(|_| {
            Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            )
        })?;
        self.record("add", out, &[a, b], || {
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())])
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value_arc(a), self.value_arc(b));
        let out = av
            .zip_map(&bv, |x, y| x * y)
            .map_err(|_| Error::shape("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())))?;
        self.record("mul", out, &[a, b], move || {
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&bv, |x, y| x * y).unwrap()),
                    needs[1].then(|| g.zip_map(&av, |x, y| x * y).unwrap()),
                ]
            })
        })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.record("scale", out, &[a], move || {
            Box::new(move |g, _| vec![Some(g.map(|x| x * s))])
        })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let out = Tensor::scalar(self.value(a).sum());
        self.record("sum", out, &[a], move || {
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.data()[0]))])
        })
    }

    /// `Σ a ⊙ w` for a constant weight tensor; projects any output to a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != weights.shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", self.shape(a), weights.shape()),
            ));
        }
        let total: T = self
            .value(a)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&x, &w)| x * w)
            .sum();
        let w = weights.clone();
        self.record("weighted_sum", Tensor::scalar(total), &[a], move || {
            Box::new(move |g, _| vec![Some(w.map(|x| x * g.data()[0]))])
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(a).to_vec();
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        self.record("reshape", out, &[a], move || {
            Box::new(move |g, _| vec![Some(g.clone().reshape(from.clone()).unwrap())])
        })
    }

    /// `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value_arc(x), self.value_arc(w));
        expect_rank("linear", &wv, 2)?;
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        if xv.last_dim() != din {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let rows = xv.rows();
        let mut y = kernels::matmul(xv.data(), wv.data(), rows, din, dout, false, false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs out {dout}", bv.shape()),
                ));
            }
            kernels::add_row_bias(&mut y, bv.data());
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::from_parts(shape, y);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record("linear", out, &inputs, move || {
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let d = kernels::matmul(g.data(), wv.data(), rows, dout, din, false, true);
                    Tensor::from_parts(xv.shape().to_vec(), d)
                });
                let gw = needs[1].then(|| {
                    let d = kernels::matmul(xv.data(), g.data(), din, rows, dout, true, false);
                    Tensor::from_parts(vec![din, dout], d)
                });
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(
                        needs[2].then(|| Tensor::from_parts(vec![dout], kernels::col_sum(g.data(), dout))),
                    );
                }
                grads
            })
        })
    }

    /// Channels-last convolution: `x[h,w,cin]`, `w[k,k,cin,cout]`, `b[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (xv, wv) = (self.value_arc(x), self.value_arc(w));
        let (h, wd, cin) = hwc("conv2d", &xv)?;
        expect_rank("conv2d", &wv, 4)?;
        let k = geom.kernel;
        if wv.shape()[..3] != [k, k, cin] {
            return Err(Error::shape(
                "conv2d",
                format!("weight {:?} for input {:?} kernel {k}", wv.shape(), xv.shape()),
            ));
        }
        let cout = wv.shape()[3];
        let (ho, wo) = match (geom.conv_out(h), geom.conv_out(wd)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input {h}x{wd} smaller than kernel {k}"),
                ))
            }
        };
        let kk = k * k * cin;
        let cols = kernels::im2col(xv.data(), (h, wd, cin), geom, (ho, wo));
        let mut y = kernels::matmul(&cols, wv.data(), ho * wo, kk, cout, false, false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?}", bv.shape())));
            }
            kernels::add_row_bias(&mut y, bv.data());
        }
        let out = Tensor::from_parts(vec![ho, wo, cout], y);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record("conv2d", out, &inputs, move || {
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let dcols = kernels::matmul(g.data(), wv.data(), ho * wo, cout, kk, false, true);
                    Tensor::from_parts(
                        vec![h, wd, cin],
                        kernels::col2im(&dcols, (h, wd, cin), geom, (ho, wo)),
                    )
                });
                let gw = needs[1].then(|| {
                    let d = kernels::matmul(&cols, g.data(), kk, ho * wo, cout, true, false);
                    Tensor::from_parts(vec![k, k, cin, cout], d)
                });
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(
                        needs[2].then(|| Tensor::from_parts(vec![cout], kernels::col_sum(g.data(), cout))),
                    );
                }
                grads
            })
        })
    }

    /// Channels-last transposed convolution: `x[h,w,cin]`, `w[cin,k,k,cout]`.
    /// Output side is `(n-1)·stride + k - 2·pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var> {
        let (xv, wv) = (self.value_arc(x), self.value_arc(w));
        let (h, wd, cin) = hwc("conv_transpose2d", &xv)?;
        expect_rank("conv_transpose2d", &wv, 4)?;
        let k = geom.kernel;
        if wv.shape()[..3] != [cin, k, k] {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("weight {:?} for input {:?} kernel {k}", wv.shape(), xv.shape()),
            ));
        }
        let cout = wv.shape()[3];
        let (ho, wo) = match (geom.transposed_out(h), geom.transposed_out(wd)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("padding {} too large for {h}x{wd}", geom.pad),
                ))
            }
        };
        let kk = k * k * cout;
        // A transposed convolution is the adjoint of a convolution whose input
        // is our output: scatter x·W through col2im.
        let cols = kernels::matmul(xv.data(), wv.data(), h * wd, cin, kk, false, false);
        let mut y = kernels::col2im(&cols, (ho, wo, cout), geom, (h, wd));
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return Err(Error::shape("conv_transpose2d", format!("bias {:?}", bv.shape())));
            }
            kernels::add_row_bias(&mut y, bv.data());
        }
        let out = Tensor::from_parts(vec![ho, wo, cout], y);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record("conv_transpose2d", out, &inputs, move || {
            Box::new(move |g, needs| {
                let dcols = kernels::im2col(g.data(), (ho, wo, cout), geom, (h, wd));
                let gx = needs[0].then(|| {
                    let d = kernels::matmul(&dcols, wv.data(), h * wd, kk, cin, false, true);
                    Tensor::from_parts(vec![h, wd, cin], d)
                });
                let gw = needs[1].then(|| {
                    let d = kernels::matmul(xv.data(), &dcols, cin, h * wd, kk, true, false);
                    Tensor::from_parts(vec![cin, k, k, cout], d)
                });
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(
                        needs[2].then(|| Tensor::from_parts(vec![cout], kernels::col_sum(g.data(), cout))),
                    );
                }
                grads
            })
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value_arc(x), self.value_arc(gamma), self.value_arc(beta));
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let (mean, rstd) = kernels::layer_norm_stats(xv.data(), d, T::lit(LN_EPS));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for r in 0..xv.rows() {
            for c in 0..d {
                let i = r * d + c;
                xhat[i] = (xv.data()[i] - mean[r]) * rstd[r];
                y[i] = xhat[i] * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), y);
        let shape = xv.shape().to_vec();
        self.record("layer_norm", out, &[x, gamma, beta], move || {
            Box::new(move |g, needs| {
                let gd = g.data();
                let rows = gd.len() / d;
                let inv_d = T::one() / T::lit(d as f64);
                let gx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); gd.len()];
                    for r in 0..rows {
                        let row = r * d..(r + 1) * d;
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for (c, i) in row.clone().enumerate() {
                            let dxh = gd[i] * gv.data()[c];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[i];
                        }
                        for (c, i) in row.enumerate() {
                            let dxh = gd[i] * gv.data()[c];
                            dx[i] = rstd[r] * (dxh - inv_d * sum_dxh - xhat[i] * inv_d * sum_dxh_xh);
                        }
                    }
                    Tensor::from_parts(shape.clone(), dx)
                });
                let ggamma = needs[1].then(|| {
                    let mut acc = vec![T::zero(); d];
                    for (i, (&gi, &xh)) in gd.iter().zip(&xhat).enumerate() {
                        acc[i % d] += gi * xh;
                    }
                    Tensor::from_parts(vec![d], acc)
                });
                let gbeta = needs[2].then(|| Tensor::from_parts(vec![d], kernels::col_sum(gd, d)));
                vec![gx, ggamma, gbeta]
            })
        })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value_arc(x);
        let out = xv.map(kernels::gelu);
        self.record("gelu", out, &[x], move || {
            Box::new(move |g, _| vec![Some(g.zip_map(&xv, |gi, xi| gi * kernels::gelu_grad(xi)).unwrap())])
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::sigmoid);
        let y = out.clone();
        self.record("sigmoid", out, &[x], move || {
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&y, |gi, yi| gi * yi * (T::one() - yi)).unwrap())]
            })
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        kernels::softmax_rows(out.data_mut(), d);
        let y = out.clone();
        self.record("softmax", out, &[x], move || {
            Box::new(move |g, _| {
                let dx = kernels::softmax_rows_backward(y.data(), g.data(), d);
                vec![Some(Tensor::from_parts(y.shape().to_vec(), dx))]
            })
        })
    }

    /// Scaled dot-product attention of `[n, d]` queries, keys and values split
    /// into `heads` heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value_arc(q), self.value_arc(k), self.value_arc(v));
        expect_rank("attention", &qv, 2)?;
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let (n, d) = (qv.shape()[0], qv.shape()[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d} not divisible into {heads} heads"),
            ));
        }
        let (o, probs) = kernels::attention_forward(qv.data(), kv.data(), vv.data(), n, d, heads);
        let out = Tensor::from_parts(vec![n, d], o);
        self.record("attention", out, &[q, k, v], move || {
            Box::new(move |g, _| {
                let (dq, dk, dv) = kernels::attention_backward(
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    &probs,
                    g.data(),
                    n,
                    d,
                    heads,
                );
                vec![
                    Some(Tensor::from_parts(vec![n, d], dq)),
                    Some(Tensor::from_parts(vec![n, d], dk)),
                    Some(Tensor::from_parts(vec![n, d], dv)),
                ]
            })
        })
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Arc<Tensor<T>>> = parts.iter().map(|&p| self.value_arc(p)).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_last(&refs)?;
        let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
        self.record("concat", out, parts, move || {
            Box::new(move |g, needs| {
                let mut start = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let slice = need.then(|| g.slice_last(start, start + w).unwrap());
                        start += w;
                        slice
                    })
                    .collect()
            })
        })
    }

    /// Channels `[start, end)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.slice_last(start, end)?;
        let d = xv.last_dim();
        let shape = xv.shape().to_vec();
        self.record("slice_last", out, &[x], move || {
            Box::new(move |g, _| {
                let w = end - start;
                let mut dx = Tensor::zeros(shape.clone());
                for (row, grow) in dx.data_mut().chunks_exact_mut(d).zip(g.data().chunks_exact(w)) {
                    row[start..end].copy_from_slice(grow);
                }
                vec![Some(dx)]
            })
        })
    }

    /// Bilinear resampling of `[h,w,c]` to `[out_h,out_w,c]` (half-pixel
    /// centres, edges clamped).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let (h, w, c) = hwc("resize_bilinear", xv)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear", "zero-sized output"));
        }
        if (h, w) == (out_h, out_w) {
            let out = xv.clone();
            return self.record("resize_bilinear", out, &[x], || {
                Box::new(|g, _| vec![Some(g.clone())])
            });
        }
        let ay = AxisInterp::<T>::new(h, out_h);
        let ax = AxisInterp::<T>::new(w, out_w);
        let out = Tensor::from_parts(
            vec![out_h, out_w, c],
            kernels::resize_forward(xv.data(), (h, w, c), &ay, &ax),
        );
        self.record("resize_bilinear", out, &[x], move || {
            Box::new(move |g, _| {
                vec![Some(Tensor::from_parts(
                    vec![h, w, c],
                    kernels::resize_backward(g.data(), (h, w, c), &ay, &ax),
                ))]
            })
        })
    }

    /// Mean binary focal loss of `logits` against a constant `{0,1}` target:
    /// `mean(-(1 - p_t)^γ · ln p_t)` with `p_t = σ(z)` for positives and
    /// `1 - σ(z)` for negatives.
    pub fn focal_loss(&mut self, logits: Var, target: &Tensor<T>, gamma: T) -> Result<Var> {
        let zv = self.value_arc(logits);
        if zv.shape() != target.shape() {
            return Err(Error::shape(
                "focal_loss",
                format!("logits {:?} vs target {:?}", zv.shape(), target.shape()),
            ));
        }
        if target.data().iter().any(|&t| t != T::zero() && t != T::one()) {
            return Err(Error::Contract("focal_loss target must be binary".into()));
        }
        let n = T::lit(zv.len() as f64);
        let signs: Vec<T> = target
            .data()
            .iter()
            .map(|&t| if t == T::one() { T::one() } else { -T::one() })
            .collect();
        let mut total = T::zero();
        for (&z, &s) in zv.data().iter().zip(&signs) {
            let u = s * z;
            let log_pt = -kernels::softplus(-u);
            let one_minus = kernels::sigmoid(-u);
            total += -one_minus.powf(gamma) * log_pt;
        }
        let out = Tensor::scalar(total / n);
        self.record("focal_loss", out, &[logits], move || {
            Box::new(move |g, _| {
                let scale = g.data()[0] / n;
                let d: Vec<T> = zv
                    .data()
                    .iter()
                    .zip(&signs)
                    .map(|(&z, &s)| {
                        let u = s * z;
                        let q = kernels::sigmoid(u);
                        let one_minus = kernels::sigmoid(-u);
                        let log_q = -kernels::softplus(-u);
                        let dl_du = one_minus.powf(gamma) * (gamma * q * log_q - one_minus);
                        scale * s * dl_du
                    })
                    .collect();
                vec![Some(Tensor::from_parts(zv.shape().to_vec(), d))]
            })
        })
    }
}
