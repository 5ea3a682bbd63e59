//! Dense 64-bit tensors, a reverse-mode tape over a fixed operation set, and
//! a central-difference gradient checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport, GRAD_CHECK_ABS_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
