use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to the operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input outside the mathematical domain of an operation (e.g. log of a non-positive value).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence has no unpadded time steps")]
    EmptySequence,

    /// A quantity is undefined for the given input (zero variance, zero denominator, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("format version mismatch in {path}: expected {expected}, found {found}")]
    Version { path: PathBuf, expected: String, found: String },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("missing file: {0}")]
    Missing(PathBuf),

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { what: what.into(), detail: detail.into() }
    }
}
