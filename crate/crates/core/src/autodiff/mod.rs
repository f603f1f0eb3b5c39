//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Stencil};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

