//! Late-fusion click-based interactive segmentation: a ViT backbone run once
//! per image, a lightweight per-click head, the simulated-user evaluation
//! protocol and a trainer.
//!
//! The numeric core is generic over the scalar type; [`Model32`] is the
//! training and serving precision, [`Model64`] the verification precision.

pub mod backbone;
pub mod checkpoint;
pub mod clicksim;
pub mod data;
pub mod error;
pub mod head;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numeric;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use mask::{Click, ImageTensor, Label, Mask};
pub use model::{ImageFeatures, Model, ModelConfig, Prediction};
pub use scalar::{DType, Scalar};

pub type Tensor32 = numeric::Tensor<f32>;
pub type Tensor64 = numeric::Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
