//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("failed to encode image {path}: {source}")]
    ImageEncode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("no mask found for image stem \"{stem}\"")]
    MissingMask { stem: String },

    #[error("dataset at {path} is empty")]
    EmptyDataset { path: PathBuf },

    #[error("dataset has {have} samples but an episode needs {need}")]
    DatasetTooSmall { have: usize, need: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{what} must be a multiple of {divisor}, got {value}")]
    NotDivisible {
        what: &'static str,
        divisor: usize,
        value: usize,
    },

    #[error("expected binary input for {what}, found value {value}")]
    NonBinary { what: &'static str, value: f64 },

    #[error("non-finite loss at iteration {iteration} (lr={lr})")]
    NonFiniteLoss { iteration: usize, lr: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown config key \"{0}\"")]
    UnknownConfigKey(String),

    #[error("config key \"{key}\": {message}")]
    ConfigValue { key: String, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (flags, config files) rather
    /// than a failure while doing the work. The CLI maps these to exit code 1.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::UnknownConfigKey(_)
                | Error::ConfigValue { .. }
        )
    }
}
