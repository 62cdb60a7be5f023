use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A hyperparameter is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A numeric value lies outside the domain of a function (e.g. log of a non-probability).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an API precondition that is not a shape problem.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("mean over an empty set: {0}")]
    UndefinedMean(String),

    #[error("malformed {kind} data: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error("{}:{line}: {msg}", path.display())]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("query {query_id} unusable: {reason}")]
    QueryUnusable { query_id: u64, reason: &'static str },

    #[error("non-finite loss at step {}: {}", .0.step, .0)]
    NonFinite(Box<crate::train::Snapshot>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn format(kind: &'static str, msg: impl Into<String>) -> Self {
        Error::Format { kind, msg: msg.into() }
    }
}
