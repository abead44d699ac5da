use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the segmentation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} must be divisible by {multiple}, got {value}")]
    NotDivisible {
        what: &'static str,
        value: usize,
        multiple: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("{0}")]
    Statistics(String),

    #[error("failed to place shapes without overlap after {0} attempts")]
    PlacementFailed(usize),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
