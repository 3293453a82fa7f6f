//! The per-click network: prompt encoding, fusion with the cached image
//! features, refinement blocks, skip connections, feature pyramid and mask
//! decoder.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{check_divisible, FeatureTaps, TAP_COUNT};
use crate::error::{Error, Result};
use crate::mask::{Click, Label, Mask};
use crate::nn::{run_blocks, Block, Conv, ConvTranspose, Linear};
use crate::numeric::{ConvGeom, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Which fusion variant the head runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Multi-level projection of all taps plus skip connections.
    #[default]
    Full,
    /// Single tap `f₄`, no skips, pyramid built from the refined features.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub fusion_depth: usize,
    pub click_radius: usize,
    pub binarize_threshold: f64,
    pub pyramid_width: usize,
    pub decoder_width: usize,
    pub mode: HeadMode,
}

impl HeadConfig {
    pub fn toy() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            fusion_depth: 4,
            click_radius: 5,
            binarize_threshold: 0.5,
            pyramid_width: 32,
            decoder_width: 32,
            mode: HeadMode::Full,
        }
    }

    pub fn paper_shaped() -> Self {
        Self {
            d_model: 768,
            n_heads: 12,
            fusion_depth: 4,
            click_radius: 5,
            binarize_threshold: 0.5,
            pyramid_width: 128,
            decoder_width: 128,
            mode: HeadMode::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fusion_depth == 0 {
            return Err(Error::Config("fusion_depth must be at least 1".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "head d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.binarize_threshold) {
            return Err(Error::Config(format!(
                "binarize_threshold {} outside [0, 1]",
                self.binarize_threshold
            )));
        }
        if self.pyramid_width == 0 || self.decoder_width == 0 {
            return Err(Error::Config("pyramid and decoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Rasterises clicks as closed disks `(a-i)² + (b-j)² ≤ r²`, clipped at the
/// borders. Returns the `+` and `-` planes.
pub fn rasterize_clicks(clicks: &[Click], height: usize, width: usize, radius: usize) -> Result<(Mask, Mask)> {
    let mut pos = Mask::zeros(height, width);
    let mut neg = Mask::zeros(height, width);
    let r2 = (radius * radius) as i64;
    for (index, c) in clicks.iter().enumerate() {
        if c.row >= height || c.col >= width {
            return Err(Error::ClickOutOfBounds {
                index,
                row: c.row,
                col: c.col,
                height,
                width,
            });
        }
        let plane = match c.label {
            Label::Positive => &mut pos,
            Label::Negative => &mut neg,
        };
        let (i0, i1) = (c.row.saturating_sub(radius), (c.row + radius).min(height - 1));
        let (j0, j1) = (c.col.saturating_sub(radius), (c.col + radius).min(width - 1));
        for a in i0..=i1 {
            let di = a as i64 - c.row as i64;
            for b in j0..=j1 {
                let dj = b as i64 - c.col as i64;
                if di * di + dj * dj <= r2 {
                    plane.set(a, b, true);
                }
            }
        }
    }
    Ok((pos, neg))
}

/// The three binary planes fed to the prompt embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptMaps {
    pub positive: Mask,
    pub negative: Mask,
    pub previous: Mask,
}

impl PromptMaps {
    pub fn new(positive: Mask, negative: Mask, previous: Mask) -> Result<Self> {
        positive.check_same_dims(&negative, "prompt_maps")?;
        positive.check_same_dims(&previous, "prompt_maps")?;
        Ok(Self {
            positive,
            negative,
            previous,
        })
    }

    pub fn from_clicks(clicks: &[Click], previous: &Mask, radius: usize) -> Result<Self> {
        let (p, n) = rasterize_clicks(clicks, previous.height(), previous.width(), radius)?;
        Self::new(p, n, previous.clone())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.positive.dims()
    }

    /// `[H, W, 3]` with channels `(m₊, m₋, m_prev)`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w) = self.dims();
        let mut data = Vec::with_capacity(h * w * 3);
        let planes = [&self.positive, &self.negative, &self.previous];
        for idx in 0..h * w {
            for p in planes {
                data.push(if p.bits()[idx] { T::one() } else { T::zero() });
            }
        }
        Tensor::from_parts(vec![h, w, 3], data)
    }
}

/// Element-wise sum of image and prompt features.
pub fn fuse<T: Scalar>(f_img: &Tensor<T>, f_prompt: &Tensor<T>) -> Result<Tensor<T>> {
    if f_img.shape() != f_prompt.shape() {
        return Err(Error::shape(
            "fuse",
            format!("{:?} vs {:?}", f_img.shape(), f_prompt.shape()),
        ));
    }
    f_img.zip_map(f_prompt, |a, b| a + b)
}

/// `f̂ᵢ = Concat(f̂_mix, fᵢ)` for every tap.
pub fn skip_concat<T: Scalar>(f_mix: &Tensor<T>, taps: &FeatureTaps<T>) -> Result<Vec<Tensor<T>>> {
    (0..TAP_COUNT)
        .map(|i| {
            if f_mix.shape() != taps.get(i).shape() {
                return Err(Error::shape(
                    "skip_concat",
                    format!("f_mix {:?} vs tap {i} {:?}", f_mix.shape(), taps.get(i).shape()),
                ));
            }
            Tensor::concat_last(&[f_mix, taps.get(i)])
        })
        .collect()
}

/// Logit corresponding to a probability threshold (`±∞` at 1 and 0).
fn logit_threshold(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `sigmoid(logit) ≥ threshold`, compared in logit space.
pub fn binarize<T: Scalar>(logits: &Tensor<T>, threshold: f64) -> Result<Mask> {
    if logits.rank() < 2 {
        return Err(Error::shape("binarize", format!("{:?}", logits.shape())));
    }
    let (h, w) = (logits.shape()[0], logits.shape()[1]);
    if logits.len() != h * w {
        return Err(Error::shape("binarize", format!("expected one channel, got {:?}", logits.shape())));
    }
    let t = logit_threshold(threshold);
    Mask::from_bits(h, w, logits.data().iter().map(|&z| z.as_f64() >= t).collect())
}

/// Tape handles for the per-image inputs of the head.
#[derive(Clone, Debug)]
pub struct HeadInputs {
    pub f_img: Var,
    pub taps: Vec<Var>,
}

#[derive(Debug)]
pub struct Head {
    pub config: HeadConfig,
    patch_size: usize,
    prompt_embed: Conv,
    project: Linear,
    blocks: Vec<Block>,
    up4: (ConvTranspose, ConvTranspose),
    up2: ConvTranspose,
    same: Conv,
    down: Conv,
    level_proj: Vec<Linear>,
    fuse_conv: Linear,
    predict: Linear,
    invocations: AtomicU64,
}

impl Clone for Head {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            patch_size: self.patch_size,
            prompt_embed: self.prompt_embed.clone(),
            project: self.project.clone(),
            blocks: self.blocks.clone(),
            up4: self.up4.clone(),
            up2: self.up2.clone(),
            same: self.same.clone(),
            down: self.down.clone(),
            level_proj: self.level_proj.clone(),
            fuse_conv: self.fuse_conv.clone(),
            predict: self.predict.clone(),
            invocations: AtomicU64::new(self.invocations()),
        }
    }
}

impl Head {
    pub fn new<T: Scalar, R: Rng>(
        config: HeadConfig,
        patch_size: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let p = patch_size;
        let (cp, cd) = (config.pyramid_width, config.decoder_width);
        let prompt_embed = Conv::new(store, "head.prompt_embed", 3, d, ConvGeom::new(p, p, 0), rng);
        let (project, cin) = match config.mode {
            HeadMode::Full => (Linear::new(store, "head.project", TAP_COUNT * d, d, rng), 2 * d),
            HeadMode::Baseline => (Linear::new(store, "head.project", d, d, rng), d),
        };
        let blocks = (0..config.fusion_depth)
            .map(|i| Block::new(store, &format!("head.blocks.{i}"), d, config.n_heads, rng))
            .collect();
        let s2 = ConvGeom::new(2, 2, 0);
        let up4 = (
            ConvTranspose::new(store, "head.pyramid.up4.0", cin, cp, s2, rng),
            ConvTranspose::new(store, "head.pyramid.up4.1", cp, cp, s2, rng),
        );
        let up2 = ConvTranspose::new(store, "head.pyramid.up2", cin, cp, s2, rng);
        let same = Conv::new(store, "head.pyramid.same", cin, cp, ConvGeom::new(1, 1, 0), rng);
        let down = Conv::new(store, "head.pyramid.down", cin, cp, s2, rng);
        let level_proj = (0..TAP_COUNT)
            .map(|i| Linear::new(store, &format!("head.decoder.level{i}"), cp, cd, rng))
            .collect();
        let fuse_conv = Linear::new(store, "head.decoder.fuse", TAP_COUNT * cd, cd, rng);
        let predict = Linear::new(store, "head.decoder.predict", cd, 1, rng);
        Ok(Self {
            config,
            patch_size,
            prompt_embed,
            project,
            blocks,
            up4,
            up2,
            same,
            down,
            level_proj,
            fuse_conv,
            predict,
            invocations: AtomicU64::new(0),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.prompt_embed.params();
        ids.extend(self.project.params());
        for b in &self.blocks {
            ids.extend(b.params());
        }
        ids.extend(self.up4.0.params());
        ids.extend(self.up4.1.params());
        ids.extend(self.up2.params());
        ids.extend(self.same.params());
        ids.extend(self.down.params());
        for l in &self.level_proj {
            ids.extend(l.params());
        }
        ids.extend(self.fuse_conv.params());
        ids.extend(self.predict.params());
        ids
    }

    /// Number of full per-click passes run so far.
    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn embed_prompts_on<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        maps: &PromptMaps,
    ) -> Result<Var> {
        let (h, w) = maps.dims();
        check_divisible(h, w, self.patch_size)?;
        let x = tape.constant(maps.to_tensor());
        self.prompt_embed.forward(tape, store, x)
    }

    /// Image-side projection: all taps concatenated in full mode, `f₄` alone
    /// in baseline mode.
    pub fn project_on<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, taps: &[Var]) -> Result<Var> {
        if taps.len() != TAP_COUNT {
            return Err(Error::shape("project_multilevel", format!("{} taps", taps.len())));
        }
        let x = match self.config.mode {
            HeadMode::Full => tape.concat(taps)?,
            HeadMode::Baseline => taps[TAP_COUNT - 1],
        };
        self.project.forward(tape, store, x)
    }

    pub fn refine_on<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f_mix: Var) -> Result<Var> {
        run_blocks(&self.blocks, tape, store, f_mix)
    }

    /// Rescales the four inputs to 4×, 2×, 1× and ½× of the token grid.
    pub fn pyramid_on<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &[Var],
    ) -> Result<Vec<Var>> {
        if inputs.len() != TAP_COUNT {
            return Err(Error::shape("build_pyramid", format!("{} inputs", inputs.len())));
        }
        let s = tape.shape(inputs[0]).to_vec();
        if s.len() != 3 || inputs.iter().any(|&v| tape.shape(v) != s.as_slice()) {
            return Err(Error::shape("build_pyramid", "inputs must share one [h, w, c] shape"));
        }
        if s[0] % 2 != 0 || s[1] % 2 != 0 {
            return Err(Error::shape(
                "build_pyramid",
                format!("the 1/2x level needs an even token grid, got {}x{}", s[0], s[1]),
            ));
        }
        let f1 = self.up4.0.forward(tape, store, inputs[0])?;
        let f1 = tape.gelu(f1)?;
        let f1 = self.up4.1.forward(tape, store, f1)?;
        let f2 = self.up2.forward(tape, store, inputs[1])?;
        let f3 = self.same.forward(tape, store, inputs[2])?;
        let f4 = self.down.forward(tape, store, inputs[3])?;
        Ok(vec![f1, f2, f3, f4])
    }

    /// SegFormer-style decoding to `[height, width, 1]` logits.
    pub fn decode_on<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pyramid: &[Var],
        height: usize,
        width: usize,
    ) -> Result<Var> {
        if pyramid.len() != TAP_COUNT {
            return Err(Error::shape("decode", format!("{} levels", pyramid.len())));
        }
        let s1 = tape.shape(pyramid[0]).to_vec();
        if s1.len() != 3 || s1[0] % 4 != 0 || s1[1] % 4 != 0 {
            return Err(Error::shape("decode", format!("level 1 {s1:?}")));
        }
        let (h, w) = (s1[0] / 4, s1[1] / 4);
        let expected = [(4 * h, 4 * w), (2 * h, 2 * w), (h, w), (h / 2, w / 2)];
        for (lvl, (&v, &(eh, ew))) in pyramid.iter().zip(&expected).enumerate() {
            let s = tape.shape(v);
            if s.len() != 3 || (s[0], s[1]) != (eh, ew) || s[2] != self.config.pyramid_width {
                return Err(Error::shape(
                    "decode",
                    format!(
                        "level {} is {s:?}, expected [{eh}, {ew}, {}]",
                        lvl + 1,
                        self.config.pyramid_width
                    ),
                ));
            }
        }
        let mut levels = Vec::with_capacity(TAP_COUNT);
        for (proj, &f) in self.level_proj.iter().zip(pyramid) {
            let x = proj.forward(tape, store, f)?;
            levels.push(tape.resize_bilinear(x, s1[0], s1[1])?);
        }
        let x = tape.concat(&levels)?;
        let x = self.fuse_conv.forward(tape, store, x)?;
        let x = tape.gelu(x)?;
        let x = self.predict.forward(tape, store, x)?;
        tape.resize_bilinear(x, height, width)
    }

    /// Full per-click pass from cached image features to `[H, W, 1]` logits.
    pub fn forward_on<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &HeadInputs,
        maps: &PromptMaps,
    ) -> Result<Var> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let (height, width) = maps.dims();
        let f_prompt = self.embed_prompts_on(tape, store, maps)?;
        if tape.shape(f_prompt) != tape.shape(inputs.f_img) {
            return Err(Error::shape(
                "fuse",
                format!(
                    "prompt features {:?} vs image features {:?}",
                    tape.shape(f_prompt),
                    tape.shape(inputs.f_img)
                ),
            ));
        }
        let f_mix = tape.add(inputs.f_img, f_prompt)?;
        let refined = self.refine_on(tape, store, f_mix)?;
        let levels = match self.config.mode {
            HeadMode::Full => {
                let mut v = Vec::with_capacity(TAP_COUNT);
                for &tap in &inputs.taps {
                    v.push(tape.concat(&[refined, tap])?);
                }
                v
            }
            HeadMode::Baseline => vec![refined; TAP_COUNT],
        };
        let pyramid = self.pyramid_on(tape, store, &levels)?;
        self.decode_on(tape, store, &pyramid, height, width)
    }

    // Tensor-level entry points, each evaluated without gradients.

    pub fn embed_prompts<T: Scalar>(&self, store: &ParamStore<T>, maps: &PromptMaps) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let v = self.embed_prompts_on(&mut tape, store, maps)?;
        Ok(tape.value(v).clone())
    }

    pub fn project_multilevel<T: Scalar>(&self, store: &ParamStore<T>, taps: &FeatureTaps<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = taps.shared().iter().map(|t| tape.constant_shared(t.clone())).collect();
        let v = self.project_on(&mut tape, store, &vars)?;
        Ok(tape.value(v).clone())
    }

    pub fn refine<T: Scalar>(&self, store: &ParamStore<T>, f_mix: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(f_mix.clone());
        let v = self.refine_on(&mut tape, store, x)?;
        Ok(tape.value(v).clone())
    }

    pub fn build_pyramid<T: Scalar>(&self, store: &ParamStore<T>, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.pyramid_on(&mut tape, store, &vars)?;
        Ok(out.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Logits `[H, W, 1]` and the binarised mask.
    pub fn decode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        pyramid: &[Tensor<T>],
        height: usize,
        width: usize,
        threshold: f64,
    ) -> Result<(Tensor<T>, Mask)> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = pyramid.iter().map(|t| tape.constant(t.clone())).collect();
        let v = self.decode_on(&mut tape, store, &vars, height, width)?;
        let logits = tape.value(v).clone();
        let mask = binarize(&logits, threshold)?;
        Ok((logits, mask))
    }
}
