use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid field {field}: {msg}")]
    Invalid { field: &'static str, msg: String },
    #[error("non-positive distance {0}")]
    NonPositiveDistance(f64),
    #[error("empty power trace")]
    EmptyTrace,
}

impl Error {
    pub(crate) fn invalid(field: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
