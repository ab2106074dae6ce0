use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a precondition (shapes, ranges, configuration values).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A linear solve could not reach its residual tolerance.
    #[error("numerical failure: {reason} (relative residual {residual:e})")]
    Numerical { reason: String, residual: f64 },

    /// Malformed binary or text payload.
    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("training diverged at iteration {iteration} ({step}): {detail}; try a smaller learning rate")]
    Divergence {
        iteration: usize,
        step: &'static str,
        detail: String,
    },

    #[error("autoencoder solve failed at iteration {iteration}: {source}")]
    Solver {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
