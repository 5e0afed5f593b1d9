//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LsmError {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("configuration invalid:\n{}", .0.join("\n"))]
    ConfigValidation(Vec<String>),

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("COCO schema violation: {0}")]
    Schema(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("{0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss in component {component} at step {step}")]
    NonFiniteLoss { component: String, step: u64 },

    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, LsmError>;

impl LsmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LsmError::Io {
            path: path.into(),
            source,
        }
    }
}
