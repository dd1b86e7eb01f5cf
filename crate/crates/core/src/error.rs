use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the flow library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image extents do not agree.
    #[error("shape error: {0}")]
    Shape(String),

    /// A layer, optimizer or run configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input is too small for the requested operation.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Frame extents cannot be consumed by the network without padding.
    #[error(
        "inadmissible extents {height}x{width}: both must be multiples of {multiple} \
         (pad by {pad_height} rows and {pad_width} columns)"
    )]
    Admissibility {
        height: usize,
        width: usize,
        multiple: usize,
        pad_height: usize,
        pad_width: usize,
    },

    /// A backward pass was requested with a cache that does not belong to the network.
    #[error("state error: {0}")]
    State(String),

    /// A loss or parameter became NaN or infinite.
    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("dataset at {0} contains no usable frame pairs")]
    EmptyDataset(PathBuf),

    /// Checkpoint header or payload is not what this build expects.
    #[error("checkpoint error: expected {expected}, found {found}")]
    Checkpoint { expected: String, found: String },

    /// A file exists but its content is not in the expected format.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
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

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
