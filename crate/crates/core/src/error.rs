//! Error type shared by every module.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad magic, unknown version or tag, malformed text block.
    #[error("format error: {0}")]
    Format(String),

    /// Structurally inconsistent file contents (truncation, bad offsets, length mismatch).
    #[error("corrupt data: {0}")]
    Corruption(String),

    /// Contents parse but violate an invariant (non-finite values, duplicate names, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Caller passed an argument outside the operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Shape mismatch while binding or executing a layer.
    #[error("layer {index} ({kind}): {message}")]
    Shape {
        index: usize,
        kind: String,
        message: String,
    },

    /// Fixed-point width analysis rejected a kernel invocation.
    #[error("overflow: {0}")]
    Overflow(String),

    /// An internal invariant was violated; indicates a bug.
    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for usage and validation problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Io { .. } | Error::Overflow(_) | Error::Internal(_) => 1,
            _ => 2,
        }
    }
}
