use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("integrity violation: {0}")]
    Integrity(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("render failed: {0}")]
    Render(String),

    #[error("backend error: {0}")]
    Backend(#[from] BackendError),

    #[error("{} decoder cell(s) could not be filled, first: {:?}", .0.len(), .0.first())]
    MissingCells(Vec<(String, String)>),

    #[error("evaluation sets differ between `{left}` and `{right}`")]
    UnmatchedEvaluationSets { left: String, right: String },

    #[error("denominator is zero")]
    ZeroDenominator,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failure reported by a decoder or encoder backend.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    /// Transient failure; the request may be retried.
    #[error("transport failure: {0}")]
    Transport(String),

    /// Permanent failure; retrying will not help.
    #[error("{0}")]
    Fatal(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}
