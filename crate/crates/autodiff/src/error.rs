use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("node {0} is not connected to the differentiated output")]
    Disconnected(usize),

    #[error(
        "output depends on a gradient that was recorded without create_graph; \
         its derivative is unavailable"
    )]
    DetachedGradient,

    #[error("vector length {got} does not match parameter count {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}
