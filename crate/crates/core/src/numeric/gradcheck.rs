//! Finite-difference verification of the reverse-mode kernels.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::kernels::ConvGeom;
use crate::numeric::{Tape, Tensor, Var};

/// Every differentiable kernel the model is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Linear,
    Conv2d,
    ConvTranspose2d,
    LayerNorm,
    SelfAttention,
    Gelu,
    Softmax,
    Sigmoid,
    Add,
    Concat,
    ResizeBilinear,
    FocalLoss,
}

impl Kernel {
    pub const ALL: [Kernel; 12] = [
        Kernel::Linear,
        Kernel::Conv2d,
        Kernel::ConvTranspose2d,
        Kernel::LayerNorm,
        Kernel::SelfAttention,
        Kernel::Gelu,
        Kernel::Softmax,
        Kernel::Sigmoid,
        Kernel::Add,
        Kernel::Concat,
        Kernel::ResizeBilinear,
        Kernel::FocalLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Linear => "linear",
            Kernel::Conv2d => "conv2d",
            Kernel::ConvTranspose2d => "conv_transpose2d",
            Kernel::LayerNorm => "layer_norm",
            Kernel::SelfAttention => "self_attention",
            Kernel::Gelu => "gelu",
            Kernel::Softmax => "softmax",
            Kernel::Sigmoid => "sigmoid",
            Kernel::Add => "add",
            Kernel::Concat => "concat",
            Kernel::ResizeBilinear => "resize_bilinear",
            Kernel::FocalLoss => "focal_loss",
        }
    }

    /// Kernels that are linear in their inputs, checked at a tighter bound.
    pub fn is_linear_map(self) -> bool {
        matches!(
            self,
            Kernel::Linear | Kernel::Add | Kernel::Concat | Kernel::ResizeBilinear
        )
    }

    /// Input shape used by the default check of this kernel.
    pub fn default_shape(self) -> Vec<usize> {
        match self {
            Kernel::Linear => vec![8, 8],
            Kernel::Conv2d | Kernel::ConvTranspose2d => vec![5, 6, 3],
            Kernel::LayerNorm => vec![4, 6],
            Kernel::SelfAttention => vec![4, 8],
            Kernel::Gelu | Kernel::Sigmoid | Kernel::Softmax => vec![3, 7],
            Kernel::Add | Kernel::Concat => vec![3, 4, 5],
            Kernel::ResizeBilinear => vec![4, 5, 2],
            Kernel::FocalLoss => vec![6, 7],
        }
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownKernel(s.to_string()))
    }
}

/// Denominator floor of the relative error, so that gradients that are
/// numerically zero compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-2;

/// Compares reverse-mode gradients of `kernel` against central differences
/// `(f(x+ε) - f(x-ε)) / 2ε` for every input element (including weights) and
/// returns the worst relative error. The kernel output is reduced to a
/// scalar with fixed random weights.
pub fn grad_check(kernel: &str, input_shape: &[usize], eps: f64) -> Result<f64> {
    grad_check_seeded(kernel.parse()?, input_shape, eps, 0x9e37_79b9)
}

pub fn grad_check_seeded(kernel: Kernel, input_shape: &[usize], eps: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = Case::build(kernel, input_shape, &mut rng)?;

    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = case.apply(&mut tape, &vars)?;
    let proj = Tensor::from_fn(tape.shape(out).to_vec(), |_| rng.random_range(-1.0..1.0));
    let loss = tape.weighted_sum(out, &proj)?;
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::<f64>::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = case.apply(&mut t, &vars)?;
        let l = t.weighted_sum(out, &proj)?;
        Ok(t.value(l).data()[0])
    };

    let mut worst = 0.0f64;
    let mut inputs = case.inputs.clone();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[which].shape().to_vec()));
        for i in 0..inputs[which].len() {
            let x0 = inputs[which].data()[i];
            inputs[which].data_mut()[i] = x0 + eps;
            let plus = eval(&inputs)?;
            inputs[which].data_mut()[i] = x0 - eps;
            let minus = eval(&inputs)?;
            inputs[which].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

struct Case {
    kernel: Kernel,
    inputs: Vec<Tensor<f64>>,
    target: Option<Tensor<f64>>,
    heads: usize,
}

fn uniform<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

impl Case {
    fn build<R: Rng>(kernel: Kernel, shape: &[usize], rng: &mut R) -> Result<Self> {
        let need_rank = |r: usize| {
            if shape.len() == r && shape.iter().all(|&d| d > 0) {
                Ok(())
            } else {
                Err(Error::shape(
                    "grad_check",
                    format!("{} expects a rank-{r} input, got {shape:?}", kernel.name()),
                ))
            }
        };
        let last = *shape.last().unwrap_or(&0);
        let mut target = None;
        let mut heads = 1;
        let inputs = match kernel {
            Kernel::Linear => {
                need_rank(2)?;
                vec![uniform(shape, rng), uniform(&[last, last], rng), uniform(&[last], rng)]
            }
            Kernel::Conv2d => {
                need_rank(3)?;
                vec![
                    uniform(shape, rng),
                    uniform(&[3, 3, shape[2], 4], rng),
                    uniform(&[4], rng),
                ]
            }
            Kernel::ConvTranspose2d => {
                need_rank(3)?;
                vec![
                    uniform(shape, rng),
                    uniform(&[shape[2], 3, 3, 4], rng),
                    uniform(&[4], rng),
                ]
            }
            Kernel::LayerNorm => {
                need_rank(2)?;
                vec![uniform(shape, rng), uniform(&[last], rng), uniform(&[last], rng)]
            }
            Kernel::SelfAttention => {
                need_rank(2)?;
                heads = if last % 2 == 0 { 2 } else { 1 };
                vec![
                    uniform(shape, rng),
                    uniform(&[last, 3 * last], rng),
                    uniform(&[3 * last], rng),
                    uniform(&[last, last], rng),
                    uniform(&[last], rng),
                ]
            }
            Kernel::Gelu | Kernel::Softmax | Kernel::Sigmoid => {
                // spread inputs so softmax rows have no ties
                vec![Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-3.0..3.0))]
            }
            Kernel::Add => vec![uniform(shape, rng), uniform(shape, rng)],
            Kernel::Concat => {
                let mut other = shape.to_vec();
                *other.last_mut().ok_or_else(|| Error::shape("grad_check", "empty shape"))? += 1;
                vec![uniform(shape, rng), uniform(&other, rng)]
            }
            Kernel::ResizeBilinear => {
                need_rank(3)?;
                vec![uniform(shape, rng)]
            }
            Kernel::FocalLoss => {
                target = Some(Tensor::from_fn(shape.to_vec(), |_| {
                    if rng.random_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                }));
                vec![Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-4.0..4.0))]
            }
        };
        Ok(Self {
            kernel,
            inputs,
            target,
            heads,
        })
    }

    fn apply(&self, tape: &mut Tape<f64>, v: &[Var]) -> Result<Var> {
        match self.kernel {
            Kernel::Linear => tape.linear(v[0], v[1], Some(v[2])),
            Kernel::Conv2d => tape.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(3, 2, 1)),
            Kernel::ConvTranspose2d => {
                tape.conv_transpose2d(v[0], v[1], Some(v[2]), ConvGeom::new(3, 2, 1))
            }
            Kernel::LayerNorm => tape.layer_norm(v[0], v[1], v[2]),
            Kernel::SelfAttention => {
                let d = tape.shape(v[0])[1];
                let qkv = tape.linear(v[0], v[1], Some(v[2]))?;
                let q = tape.slice_last(qkv, 0, d)?;
                let k = tape.slice_last(qkv, d, 2 * d)?;
                let val = tape.slice_last(qkv, 2 * d, 3 * d)?;
                let a = tape.attention(q, k, val, self.heads)?;
                tape.linear(a, v[3], Some(v[4]))
            }
            Kernel::Gelu => tape.gelu(v[0]),
            Kernel::Softmax => tape.softmax(v[0]),
            Kernel::Sigmoid => tape.sigmoid(v[0]),
            Kernel::Add => tape.add(v[0], v[1]),
            Kernel::Concat => tape.concat(&[v[0], v[1]]),
            Kernel::ResizeBilinear => {
                let s = tape.shape(v[0]).to_vec();
                tape.resize_bilinear(v[0], 2 * s[0] + 1, s[1] + 3)
            }
            Kernel::FocalLoss => tape.focal_loss(v[0], self.target.as_ref().unwrap(), 2.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_kernel_is_rejected() {
        assert!(matches!(
            grad_check("warp_drive", &[2, 2], 1e-6),
            Err(Error::UnknownKernel(_))
        ));
    }

    #[test]
    fn linear_on_8x8_is_tight() {
        let err = grad_check("linear", &[8, 8], 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn add_gradient_is_exactly_one() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(Tensor::from_fn([2, 3], |i| i as f64));
        let b = tape.input(Tensor::from_fn([2, 3], |i| -(i as f64)));
        let s = tape.add(a, b).unwrap();
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.get(b).unwrap().data().iter().all(|&v| v == 1.0));
        // exact up to rounding: a linear map has no truncation error at any step
        assert!(grad_check("add", &[3, 4], 1e-2).unwrap() < 1e-12);
    }

    #[test]
    fn attention_over_four_tokens() {
        let err = grad_check("self_attention", &[4, 8], 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
