use std::io;

use thiserror::Error;

/// Errors raised by the learner, its kernels and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed numeric input (non-finite entries, asymmetric matrix, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A parameter outside its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A kernel failed to converge or a solve broke down.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The classifier would divide by a singular value below the floor.
    #[error("ill-conditioned state: smallest retained singular value {smallest:e} is below {floor:e}")]
    IllConditioned { smallest: f64, floor: f64 },

    /// A dense diagnostic was asked to materialize a matrix larger than the cap.
    #[error("refusing to materialize a {dim}x{dim} matrix (cap {cap})")]
    SizeCap { dim: usize, cap: usize },

    /// An operation was invoked on a state that cannot support it.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Corrupt or unsupported file contents.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid_arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
