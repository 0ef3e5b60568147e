//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A fixed-size budget (visual tokens, context length) was exceeded.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A scene edit referenced an unknown object or could not be built.
    #[error("invalid edit: {0}")]
    InvalidEdit(String),

    /// A metric is undefined for the given input (e.g. single-class AUROC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Replaying a transcript failed for a reason other than a mismatch.
    #[error("replay error: {0}")]
    Replay(String),

    /// A line-oriented input could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A binary weight file was malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
