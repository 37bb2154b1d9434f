//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Array shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A dataset, raster, or manifest is missing or malformed.
    #[error("data error: {0}")]
    Data(String),

    /// A checkpoint failed validation (magic, schema, integrity, shapes).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// The training loop hit an unrecoverable runtime condition.
    #[error("training error: {0}")]
    Train(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("manifest record: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image decode: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn train(msg: impl Into<String>) -> Self {
        Error::Train(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
