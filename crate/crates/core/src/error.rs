use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("malformed parameter file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{0}")]
    Contract(String),

    #[error("invalid value for `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite gradient for `{param}` at element {index} (value {value}) on step {step}")]
    NonFiniteGradient {
        param: String,
        index: usize,
        value: f64,
        step: u64,
    },

    #[error("arm `{arm}` failed: {source}")]
    Arm {
        arm: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Error {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by invalid user input rather than a failed run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
