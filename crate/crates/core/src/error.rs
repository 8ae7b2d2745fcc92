use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure category, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("backward root must hold a single element, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("loss function returned different values on identical parameters")]
    NonDeterministic,

    #[error("dropout is active; gradient checks need a deterministic forward pass")]
    DropoutActive,

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error ({tensor}): {reason}")]
    Checkpoint { tensor: String, reason: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (samples: {})", ids.join(", "))]
    NonFiniteLoss { epoch: usize, batch: usize, ids: Vec<String> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } => ErrorKind::Numeric,
            Error::Malformed { .. }
            | Error::Data(_)
            | Error::Checkpoint { .. }
            | Error::Io { .. }
            | Error::Json(_) => ErrorKind::Data,
            _ => ErrorKind::Usage,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
