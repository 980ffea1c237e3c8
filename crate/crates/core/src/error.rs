//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An input left the mathematical domain of an operation (log of a
    /// non-positive value, exp overflow, and the like).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Backward pass was started from a node that is not a scalar.
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    /// The caller violated an API precondition.
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A structured text file (config, vocab, checkpoint, TSV) failed to parse.
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    /// Bad configuration value or unknown configuration key.
    #[error("config error: {0}")]
    Config(String),

    /// Persisted artifacts disagree with each other (stale hashes, id gaps).
    #[error("data corruption: {0}")]
    DataCorruption(String),

    /// The requested statistical fit has no defined answer on this input.
    #[error("cannot fit: {0}")]
    Unfittable(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for I/O errors that keeps the offending path attached.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
