//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records each primitive as it is applied. Leaves created with
//! `requires_grad = true` (model parameters) receive accumulated gradients when
//! [`Tape::backward`] runs from a scalar loss.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_difference_check, finite_difference_check_many, relative_error, CoordinateCheck,
    GradCheckReport, DEFAULT_EPS, DEFAULT_TOL,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
