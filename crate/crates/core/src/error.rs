//! Error types shared across the toolkit.
//!
//! Recoverable conditions (I/O, malformed files, mismatched inputs) surface
//! as [`Error`]. Programming contract violations (tensor shape mismatches,
//! backward on a non-scalar) panic with a descriptive message instead.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Parallel files with different numbers of lines.
    #[error("line count mismatch {left} vs {right}")]
    LineCountMismatch { left: usize, right: usize },

    /// Malformed embedding text file.
    #[error("embedding format error at line {line}: {msg}")]
    EmbeddingFormat { line: usize, msg: String },

    /// An id outside a vocabulary or embedding table.
    #[error("id {id} out of range for size {size}")]
    IdOutOfRange { id: u32, size: usize },

    /// Invalid synthetic-corpus specification.
    #[error("invalid toy corpus spec: {0}")]
    InvalidSpec(String),

    /// Inconsistent run configuration discovered after argument parsing.
    #[error("configuration error: {0}")]
    Config(String),

    /// Command-line usage error (exit code 2).
    #[error("usage error: {0}")]
    Usage(String),

    /// Corrupt or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Non-finite loss or gradient during training.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            _ => 1,
        }
    }
}
