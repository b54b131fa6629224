//! Minimal reverse-mode differentiation over dense f32 tensors.

mod gradcheck;
pub mod kernels;
mod store;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use kernels::ConvGeom;
pub use store::{ParamCategory, ParamStore};
pub use tape::{BnState, Tape, Tid};
pub use tensor::Tensor;
