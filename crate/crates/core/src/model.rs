//! Backbone and head assembled behind the encode-once / predict-per-click
//! interface.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FeatureTaps};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::head::{binarize, Head, HeadConfig, HeadInputs, PromptMaps};
use crate::mask::{Click, ImageTensor, Mask};
use crate::metrics::InteractiveModel;
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    /// Seed of the weight initialisation.
    pub init_seed: u64,
    /// Pixel statistics of the training data; images fed to the model at
    /// evaluation and serving time are normalised with these.
    #[serde(default)]
    pub normalization: Normalization,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig::toy(),
            head: HeadConfig::toy(),
            init_seed: 0,
            normalization: Normalization::default(),
        }
    }

    pub fn paper_shaped() -> Self {
        Self {
            backbone: BackboneConfig::paper_shaped(),
            head: HeadConfig::paper_shaped(),
            init_seed: 0,
            normalization: Normalization::default(),
        }
    }

    pub fn patch_size(&self) -> usize {
        self.backbone.patch_size
    }

    /// Smallest size at or above `height × width` the model accepts: a
    /// multiple of twice the patch size, so the token grid stays even for
    /// the half-resolution pyramid level.
    pub fn padded_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let step = 2 * self.patch_size();
        (height.div_ceil(step) * step, width.div_ceil(step) * step)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        if self.backbone.d_model != self.head.d_model {
            return Err(Error::Config(format!(
                "head d_model {} must match backbone d_model {}",
                self.head.d_model, self.backbone.d_model
            )));
        }
        Ok(())
    }
}

/// Everything computed once per image: the taps and the projected `f_img`.
#[derive(Clone, Debug)]
pub struct ImageFeatures<T> {
    pub taps: FeatureTaps<T>,
    pub f_img: Arc<Tensor<T>>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    /// `[H, W, 1]` mask logits.
    pub logits: Tensor<T>,
    pub mask: Mask,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub head: Head,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(config.backbone.clone(), &mut store, &mut rng)?;
        let head = Head::new(config.head.clone(), config.patch_size(), &mut store, &mut rng)?;
        Ok(Self {
            config,
            store,
            backbone,
            head,
        })
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.backbone.set_frozen(&mut self.store, frozen);
        self.config.backbone.frozen = frozen;
    }

    pub fn backbone_params(&self) -> Vec<ParamId> {
        self.backbone.params()
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        self.head.params()
    }

    pub fn backbone_invocations(&self) -> u64 {
        self.backbone.invocations()
    }

    pub fn head_invocations(&self) -> u64 {
        self.head.invocations()
    }

    /// Backbone pass plus the image-side projection, both once per image.
    pub fn encode(&self, image: &ImageTensor<T>) -> Result<ImageFeatures<T>> {
        let taps = self.backbone.encode(&self.store, image)?;
        let f_img = Arc::new(self.head.project_multilevel(&self.store, &taps)?);
        Ok(ImageFeatures {
            taps,
            f_img,
            height: image.height(),
            width: image.width(),
        })
    }

    /// Records backbone and projection on a training tape.
    pub fn encode_on(&self, tape: &mut Tape<T>, image: Var) -> Result<HeadInputs> {
        let taps = self.backbone.forward_on(tape, &self.store, image)?;
        let f_img = self.head.project_on(tape, &self.store, &taps)?;
        Ok(HeadInputs { f_img, taps })
    }

    /// One interaction: runs only the head on the cached features.
    pub fn predict(&self, features: &ImageFeatures<T>, clicks: &[Click], prev: &Mask) -> Result<Prediction<T>> {
        if prev.dims() != (features.height, features.width) {
            return Err(Error::shape(
                "predict",
                format!(
                    "previous mask {:?} vs image {}x{}",
                    prev.dims(),
                    features.height,
                    features.width
                ),
            ));
        }
        let maps = PromptMaps::from_clicks(clicks, prev, self.config.head.click_radius)?;
        let mut tape = Tape::no_grad();
        let inputs = HeadInputs {
            f_img: tape.constant_shared(features.f_img.clone()),
            taps: features
                .taps
                .shared()
                .iter()
                .map(|t| tape.constant_shared(t.clone()))
                .collect(),
        };
        let out = self.head.forward_on(&mut tape, &self.store, &inputs, &maps)?;
        let logits = tape.value(out).clone();
        let mask = binarize(&logits, self.config.head.binarize_threshold)?;
        Ok(Prediction { logits, mask })
    }
}

impl<T: Scalar> Model<T> {
    /// Mask after feeding `clicks` one at a time from the empty mask.
    pub fn replay(&self, features: &ImageFeatures<T>, clicks: &[Click]) -> Result<Mask> {
        let mut mask = Mask::zeros(features.height, features.width);
        for k in 1..=clicks.len() {
            mask = self.predict(features, &clicks[..k], &mask)?.mask;
        }
        Ok(mask)
    }
}

impl<T: Scalar> InteractiveModel for Model<T> {
    type Features = ImageFeatures<T>;

    fn encode(&self, image: &ImageTensor<f32>) -> Result<ImageFeatures<T>> {
        Model::encode(self, &image.cast())
    }

    fn predict(&self, features: &ImageFeatures<T>, clicks: &[Click], prev: &Mask) -> Result<Mask> {
        Ok(Model::predict(self, features, clicks, prev)?.mask)
    }
}
