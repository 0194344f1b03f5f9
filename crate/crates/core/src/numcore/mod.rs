//! Dense `f64` tensors and tape-based reverse-mode differentiation.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{argmax, Tensor};
