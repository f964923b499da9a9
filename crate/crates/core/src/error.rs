use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("invalid dimensions: {0}")]
    Dimensions(String),

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },

    #[error("value out of range for {name}: {message}")]
    OutOfRange { name: String, message: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no block reaches texture threshold {threshold}; lower the threshold or use a more textured cover")]
    EmptyMask { threshold: f64 },

    #[error("non-finite loss at iteration {iteration}: L1={l1} L2={l2} L3={l3} L4={l4}")]
    NonFiniteLoss {
        iteration: usize,
        l1: f64,
        l2: f64,
        l3: f64,
        l4: f64,
    },

    #[error("gradient tape does not match this decoder or input")]
    StaleTape,

    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("key mismatch: {what} differs from the one recorded in the manifest")]
    KeyMismatch { what: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad data or failed verification, as opposed
    /// to malformed invocation.
    pub fn is_data_error(&self) -> bool {
        !matches!(
            self,
            Error::Config(_) | Error::InvalidParameter(_) | Error::OutOfRange { .. }
        )
    }
}
