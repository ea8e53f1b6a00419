//! Minimal reverse-mode automatic differentiation for dense f64 tensors.
//!
//! The crate provides exactly the primitives the temporal path model needs:
//! elementwise arithmetic, matrix products, concatenation, cosine, relu,
//! sigmoid, layer normalization, axis and segment reductions (sum / mean /
//! max / min / std), gather and scatter-add by row index, and a complex
//! rotation merge — plus a central finite-difference checker used as the
//! gradient oracle throughout the test suite.

mod fd;
mod tape;
mod tensor;

pub use fd::{finite_diff_check, FdCoord, FdError, FdReport};
pub use tape::{stack_rows, Gradients, Reduce, Tape, Var, LAYER_NORM_EPS, ROTATE_EPS, STD_EPS};
pub use tensor::Tensor;
