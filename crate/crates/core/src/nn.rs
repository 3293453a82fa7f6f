//! Parameterised layers shared by the backbone and the head.

use rand::Rng;

use crate::error::Result;
use crate::numeric::{ConvGeom, ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.02;

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_trunc_normal(format!("{name}.weight"), &[din, dout], INIT_STD, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[dout]),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add_ones(format!("{name}.weight"), &[d]),
            beta: store.add_zeros(format!("{name}.bias"), &[d]),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Convolution with weight `[k, k, cin, cout]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        rng: &mut R,
    ) -> Self {
        let k = geom.kernel;
        Self {
            weight: store.add_trunc_normal(format!("{name}.weight"), &[k, k, cin, cout], INIT_STD, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[cout]),
            geom,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.geom)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Transposed convolution with weight `[cin, k, k, cout]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl ConvTranspose {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        rng: &mut R,
    ) -> Self {
        let k = geom.kernel;
        Self {
            weight: store.add_trunc_normal(format!("{name}.weight"), &[cin, k, k, cout], INIT_STD, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[cout]),
            geom,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv_transpose2d(x, w, Some(b), self.geom)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`
/// with a 4× GELU MLP.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

pub const MLP_RATIO: usize = 4;

impl Block {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), d, 3 * d, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), d, d, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, MLP_RATIO * d, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), MLP_RATIO * d, d, rng),
            heads,
        }
    }

    /// `x` is a `[tokens, d]` sequence.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let d = tape.shape(x)[1];
        let h = self.norm1.forward(tape, store, x)?;
        let qkv = self.qkv.forward(tape, store, h)?;
        let q = tape.slice_last(qkv, 0, d)?;
        let k = tape.slice_last(qkv, d, 2 * d)?;
        let v = tape.slice_last(qkv, 2 * d, 3 * d)?;
        let a = tape.attention(q, k, v, self.heads)?;
        let a = self.proj.forward(tape, store, a)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, store, h)?;
        tape.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.norm1.params()[..], &self.qkv.params(), &self.proj.params()]
            .concat()
            .into_iter()
            .chain(self.norm2.params())
            .chain(self.fc1.params())
            .chain(self.fc2.params())
            .collect()
    }
}

/// Runs blocks over a `[h, w, d]` grid, flattening to tokens and back.
pub fn run_blocks<T: Scalar>(
    blocks: &[Block],
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut t = tape.reshape(x, &[shape[0] * shape[1], shape[2]])?;
    for b in blocks {
        t = b.forward(tape, store, t)?;
    }
    tape.reshape(t, &shape)
}
