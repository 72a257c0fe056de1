use std::path::PathBuf;

use ddlab_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },

    #[error("training diverged at iteration {iteration} (last finite iteration {last_valid})")]
    Diverged { iteration: usize, last_valid: usize },

    #[error("{method}: non-finite meta-gradient at outer step {step}")]
    MetaGradientNaN { method: &'static str, step: usize },

    #[error("{0}: statistic undefined for constant input")]
    ZeroVariance(&'static str),

    #[error("corrupt {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub(crate) fn invalid(what: &'static str, msg: impl Into<String>) -> Self {
        CoreError::Invalid { what, msg: msg.into() }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        CoreError::Format { what, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }

    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CoreError::Diverged { .. }
                | CoreError::MetaGradientNaN { .. }
                | CoreError::Autodiff(AutodiffError::NonFinite { .. })
        )
    }
}
