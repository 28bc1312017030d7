use std::path::PathBuf;

use layoutgen_numeric::NumericError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("document `{doc_id}`: {field}: {message}")]
    Invalid {
        doc_id: String,
        field: String,
        message: String,
    },
    #[error("{0} corpus is empty")]
    EmptyCorpus(String),
    #[error("document `{0}` has no elements")]
    EmptyDocument(String),
    #[error("document `{doc_id}` has {n} elements but the model holds at most {n_max}")]
    Capacity {
        doc_id: String,
        n: usize,
        n_max: usize,
    },
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error(transparent)]
    Numeric(NumericError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Metrics(String),
}

impl From<NumericError> for Error {
    fn from(e: NumericError) -> Self {
        match e {
            NumericError::NumericFailure(msg) => Error::NumericFailure(msg),
            other => Error::Numeric(other),
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(doc_id: &str, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            doc_id: doc_id.to_string(),
            field: field.into(),
            message: message.into(),
        }
    }

    /// NaN, divergence, or a non-finite gradient.
    pub fn is_numeric_failure(&self) -> bool {
        matches!(self, Error::NumericFailure(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
