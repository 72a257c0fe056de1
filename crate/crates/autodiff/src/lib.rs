//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it runs. [`Graph::grad`] walks the
//! record backwards; with [`GradOptions::create_graph`] the backward pass is
//! recorded too, so gradients can be differentiated again (meta-gradients
//! through unrolled training, exact Hessian-vector products).

// Negated comparisons reject NaN on purpose; tape ops are fallible, so not `std::ops`.
#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

mod error;
pub mod gradcheck;
mod graph;
mod hvp;
mod kernels;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{GradOptions, Gradients, Graph, Var};
pub use hvp::{hvp, value_and_grad, HvpMode};
pub use tensor::Tensor;
