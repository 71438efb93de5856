//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values are `f64` throughout. A [`Tape`] owns every intermediate of one
//! forward program; parameters enter as leaves via [`Tape::param`] and the
//! gradients come back from [`Tape::backward`]. Tapes are single-threaded;
//! independent tapes can run on separate threads.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use kernels::{log_add, logsumexp, sigmoid};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
