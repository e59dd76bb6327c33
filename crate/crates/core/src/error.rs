//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the simulation, learning, and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (caught at load time).
    #[error("config error: {0}")]
    Config(String),

    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A numeric quantity became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A matching-layer contract was violated.
    #[error("matching error: {0}")]
    Matching(String),

    /// The environment was asked to do something its state forbids.
    #[error("environment error: {0}")]
    Env(String),

    /// File I/O with path context.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A persisted file failed structural validation.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
