//! ViT image encoder with multi-level feature taps.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::ImageTensor;
use crate::nn::{Block, Conv, INIT_STD};
use crate::numeric::{ConvGeom, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

pub const TAP_COUNT: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub d_model: usize,
    pub depth: usize,
    pub n_heads: usize,
    /// 1-based block indices whose outputs are exported.
    pub tap_indices: Vec<usize>,
    /// Side of the square input the positional embedding is built for.
    pub image_size: usize,
    pub frozen: bool,
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            patch_size: 14,
            d_model: 64,
            depth: 8,
            n_heads: 4,
            tap_indices: vec![2, 4, 6, 8],
            image_size: 112,
            frozen: false,
        }
    }

    /// ViT-B/14 proportions.
    pub fn paper_shaped() -> Self {
        Self {
            patch_size: 14,
            d_model: 768,
            depth: 12,
            n_heads: 12,
            tap_indices: vec![3, 6, 9, 12],
            image_size: 448,
            frozen: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 {
            return bad("patch_size must be at least 1".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.tap_indices.len() != TAP_COUNT {
            return bad(format!("expected {TAP_COUNT} tap indices, got {:?}", self.tap_indices));
        }
        if self.tap_indices[0] == 0 || self.tap_indices.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "tap indices must be strictly increasing and start at 1 or later: {:?}",
                self.tap_indices
            ));
        }
        if *self.tap_indices.last().unwrap() > self.depth {
            return bad(format!(
                "tap index {} exceeds depth {}",
                self.tap_indices.last().unwrap(),
                self.depth
            ));
        }
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        Ok(())
    }
}

/// The four cached tap tensors `f₁..f₄`, each `[H/P, W/P, d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTaps<T> {
    taps: Vec<Arc<Tensor<T>>>,
}

impl<T: Scalar> FeatureTaps<T> {
    pub fn new(taps: Vec<Tensor<T>>) -> Result<Self> {
        Self::from_shared(taps.into_iter().map(Arc::new).collect())
    }

    pub(crate) fn from_shared(taps: Vec<Arc<Tensor<T>>>) -> Result<Self> {
        if taps.len() != TAP_COUNT {
            return Err(Error::shape("taps", format!("expected {TAP_COUNT}, got {}", taps.len())));
        }
        if taps[0].rank() != 3 || taps.iter().any(|t| t.shape() != taps[0].shape()) {
            return Err(Error::shape(
                "taps",
                format!(
                    "taps must share one [h, w, d] shape: {:?}",
                    taps.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()
                ),
            ));
        }
        Ok(Self { taps })
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.taps[i]
    }

    pub(crate) fn shared(&self) -> &[Arc<Tensor<T>>] {
        &self.taps
    }

    /// `(h, w, d)` of every tap.
    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.taps[0].shape();
        (s[0], s[1], s[2])
    }
}

/// Vision transformer without a class token; only the spatial grid is kept.
#[derive(Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    patch: Conv,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    invocations: AtomicU64,
}

impl Clone for Backbone {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            patch: self.patch.clone(),
            pos_embed: self.pos_embed,
            blocks: self.blocks.clone(),
            invocations: AtomicU64::new(self.invocations()),
        }
    }
}

pub(crate) fn check_divisible(height: usize, width: usize, patch: usize) -> Result<()> {
    if height % patch != 0 {
        return Err(Error::Divisibility {
            axis: "height",
            size: height,
            patch,
        });
    }
    if width % patch != 0 {
        return Err(Error::Divisibility {
            axis: "width",
            size: width,
            patch,
        });
    }
    Ok(())
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(config: BackboneConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (p, d) = (config.patch_size, config.d_model);
        let patch = Conv::new(store, "backbone.patch_embed", 3, d, ConvGeom::new(p, p, 0), rng);
        let grid = config.image_size / p;
        let pos_embed = store.add_trunc_normal("backbone.pos_embed", &[grid, grid, d], INIT_STD, rng);
        let blocks = (0..config.depth)
            .map(|i| Block::new(store, &format!("backbone.blocks.{i}"), d, config.n_heads, rng))
            .collect();
        let bb = Self {
            config,
            patch,
            pos_embed,
            blocks,
            invocations: AtomicU64::new(0),
        };
        store.set_trainable(&bb.params(), !bb.config.frozen);
        Ok(bb)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.patch.params();
        ids.push(self.pos_embed);
        for b in &self.blocks {
            ids.extend(b.params());
        }
        ids
    }

    /// Frozen parameters stay out of every gradient computation and the
    /// optimizer's parameter list.
    pub fn set_frozen<T: Scalar>(&mut self, store: &mut ParamStore<T>, frozen: bool) {
        self.config.frozen = frozen;
        store.set_trainable(&self.params(), !frozen);
    }

    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    /// P×P patch projection plus positional embedding, interpolated when the
    /// token grid differs from the build size.
    pub fn patch_embed_on<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<Var> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::shape("patch_embed", format!("expected [H, W, 3], got {s:?}")));
        }
        let p = self.config.patch_size;
        check_divisible(s[0], s[1], p)?;
        let tokens = self.patch.forward(tape, store, image)?;
        let mut pos = tape.param(store, self.pos_embed);
        let (gh, gw) = (s[0] / p, s[1] / p);
        if tape.shape(pos)[..2] != [gh, gw] {
            pos = tape.resize_bilinear(pos, gh, gw)?;
        }
        tape.add(tokens, pos)
    }

    pub fn patch_embed<T: Scalar>(&self, store: &ParamStore<T>, image: &ImageTensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(image.tensor().clone());
        let y = self.patch_embed_on(&mut tape, store, x)?;
        Ok(tape.value(y).clone())
    }

    /// Full forward pass recorded on `tape`; returns the tap outputs in order.
    pub fn forward_on<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<Vec<Var>> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let x = self.patch_embed_on(tape, store, image)?;
        let shape = tape.shape(x).to_vec();
        let mut t = tape.reshape(x, &[shape[0] * shape[1], shape[2]])?;
        let mut taps = Vec::with_capacity(TAP_COUNT);
        for (i, block) in self.blocks.iter().enumerate() {
            t = block.forward(tape, store, t)?;
            if self.config.tap_indices.contains(&(i + 1)) {
                taps.push(tape.reshape(t, &shape)?);
            }
            if taps.len() == TAP_COUNT {
                break;
            }
        }
        Ok(taps)
    }

    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, image: &ImageTensor<T>) -> Result<FeatureTaps<T>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(image.tensor().clone());
        let taps = self.forward_on(&mut tape, store, x)?;
        FeatureTaps::from_shared(taps.into_iter().map(|v| tape.value_arc(v)).collect())
    }
}
