//! Crate-wide error type.
//!
//! Variants map onto the CLI exit codes: `Config` exits 2, `AcceptanceUnmet`
//! exits 4, everything else exits 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The object is not in a state that permits the requested operation.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A forward or backward buffer picked up a NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A referenced file, checkpoint, or dataset entry does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// The run configuration failed to parse or validate.
    #[error("invalid config: {0}")]
    Config(String),

    /// An end-to-end run finished but missed a configured threshold.
    #[error("acceptance threshold unmet: {0}")]
    AcceptanceUnmet(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn invalid_state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }
}
