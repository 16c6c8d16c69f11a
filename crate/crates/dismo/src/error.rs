use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DismoError {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite value in loss term `{0}`; training aborted")]
    NonFinite(String),

    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl DismoError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DismoError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: &str, message: impl Into<String>) -> Self {
        DismoError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DismoError>;
