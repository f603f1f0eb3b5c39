use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("log of non-positive value {value} at flat index {index}")]
    LogDomain { value: f64, index: usize },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("training diverged at epoch {epoch}: `{component}` is {value}")]
    Diverged {
        epoch: usize,
        component: &'static str,
        value: f64,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad user input (configuration, shapes,
    /// malformed files) rather than a runtime or I/O failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidParam { .. }
                | Error::Shape { .. }
                | Error::InvalidNetwork(_)
                | Error::Parse { .. }
                | Error::CheckpointMismatch(_)
                | Error::Json(_)
        )
    }
}
