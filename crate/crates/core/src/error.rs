use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    /// A numeric operation produced NaN or Inf. Surfaces as exit code 3 in the CLI.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Checkpoint or report container is malformed (bad magic, truncation, version).
    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
