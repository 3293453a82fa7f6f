//! Tensor storage, differentiable kernels, the Adam optimizer and the focal
//! loss.

mod adam;
mod gradcheck;
pub mod kernels;
mod ops;
mod param;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_seeded, Kernel, REL_ERROR_FLOOR};
pub use kernels::ConvGeom;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;
use crate::scalar::Scalar;

/// Mean focal loss of `logits` against a binary `target`, evaluated without
/// recording gradients.
pub fn focal_loss<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>, gamma: T) -> Result<T> {
    let mut tape = Tape::no_grad();
    let z = tape.constant(logits.clone());
    let l = tape.focal_loss(z, target, gamma)?;
    Ok(tape.value(l).data()[0])
}
