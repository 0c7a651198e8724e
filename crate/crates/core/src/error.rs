use thiserror::Error;

/// Errors raised anywhere in the search pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors whose shapes break its contract.
    #[error("shape contract violated: {0}")]
    Shape(String),
    /// An invalid configuration value (bad groups, unknown op, bad key).
    #[error("configuration error: {0}")]
    Config(String),
    /// A NaN or infinity appeared in a forward value or gradient.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// A file could be read but not parsed.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}


impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Parse(e.to_string())
    }
}
