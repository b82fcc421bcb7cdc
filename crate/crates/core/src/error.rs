use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("value {value} outside [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("schema error in field `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("non-finite loss in term `{term}`")]
    NonFinite { term: &'static str },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    Codec { path: PathBuf, message: String },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Input/schema errors map to exit code 1, numerical failures to 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 2,
            _ => 1,
        }
    }
}
