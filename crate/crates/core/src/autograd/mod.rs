//! Dense `f64` tensors with define-by-run reverse-mode differentiation.

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, GradCheck};
pub use tape::{BackwardFault, Tape, Var, NORM_EPS};
pub use tensor::{Param, Tensor};
