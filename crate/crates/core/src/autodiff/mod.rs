//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! The op set is exactly the closure needed by the prompt model and its
//! trainer: matrix products, concat/slice plumbing, the activations of a
//! transformer block, layer norm, and the differentiable signal kernels of
//! the frequency stream. Values are computed eagerly; the tape replays in
//! reverse for gradients.

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, GradCheckReport, CHECK_KEY};
pub use graph::{GradMap, Graph, ParamKey, Var};
pub use tensor::{AutodiffError, Scalar, Tensor};
