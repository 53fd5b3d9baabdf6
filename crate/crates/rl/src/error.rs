use thiserror::Error;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid train config field {field}: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Core(#[from] mec_core::Error),
}

pub type Result<T> = std::result::Result<T, RlError>;
