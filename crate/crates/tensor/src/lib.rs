//! Dense `f64` tensors with a flat tape for reverse-mode differentiation.
//!
//! Values are recorded on a [`Tape`] and addressed through copyable [`Var`]
//! handles. [`Tape::backward`] replays the record in reverse; [`grad_check`]
//! compares the result against central finite differences.

mod error;
mod gradcheck;
mod kernels;
mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheck};
pub use kernels::bilinear_taps;
pub use ops::{sigmoid, smooth_l1_value, L2_EPS};
pub use tape::{SparseRows, Tape, Var};
pub use tensor::Tensor;
