use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates an invariant. Raised before any work starts.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two values that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A loss was asked to average over an empty index set.
    #[error("empty mask: {0}")]
    EmptyMask(String),

    /// A vector with zero L2 norm reached a cosine-similarity computation.
    #[error("zero-norm vector in {0}")]
    ZeroNorm(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Shape(_))
    }
}
