use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CganError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CganError {
    /// Tensor extents that should agree do not.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A value lies outside the domain an operation accepts (e.g. alpha outside [0,1]).
    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// The requested operation is incompatible with the model variant or configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss term `{term}` at iteration {iteration}")]
    NonFinite { term: String, iteration: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl CganError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CganError::Io {
            path: path.into(),
            source,
        }
    }
}
