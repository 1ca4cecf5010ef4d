//! Dense tensors, reverse-mode autodiff, a counter-based RNG and a
//! finite-difference gradient checker.

mod gradcheck;
mod ops;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, relative_error, GradCheckReport};
pub use rng::RngState;
pub use tensor::{grad_enabled, no_grad, BackwardFn, Gradients, Scalar, Tensor};
