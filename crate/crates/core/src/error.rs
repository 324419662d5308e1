//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation contract (dimension mismatch,
    /// out-of-range argument, degenerate geometry, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Not enough data to satisfy a statistical precondition.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A persisted artifact is malformed or from an incompatible version.
    #[error("format error: {0}")]
    Format(String),

    /// Per-record dataset validation failures.
    #[error("dataset errors:\n{}", .0.join("\n"))]
    Dataset(Vec<String>),

    /// A remote verification call failed; retryable per provider contract.
    #[error("api transport failure ({provider}): {payload}")]
    ApiTransport { provider: String, payload: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
