//! Dataset distillation laboratory: data generation, the model family,
//! deterministic training, four distillation methods and the analyses used to
//! interrogate what distilled data encodes.

// Negated comparisons reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod behavior;
pub mod curvature;
pub mod data;
pub mod distill;
pub mod error;
pub mod influence;
pub mod model;
pub mod rng;
pub mod stats;
pub mod train;

pub use error::{CoreError, Result};
pub use model::{InitMode, ModelKind, ModelSpec, Norm, ParamLayout, ParamVector};
