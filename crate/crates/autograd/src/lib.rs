//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Just enough surface for convolutional encoders, attention decoders and
//! softmax losses, with every op running in 64-bit so finite-difference checks
//! can be tight.

pub mod check;
mod params;
mod tape;
mod tensor;

pub use params::{Ctx, ParamId, ParamStore};
pub use tape::{log_sum_exp, softmax_in_place, Grads, Tape, Var, GATHER_ZERO};
pub use tensor::{ConvGeom, Tensor};
