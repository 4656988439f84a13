use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown {kind} label {label:?} in {record}")]
    UnknownLabel {
        kind: &'static str,
        label: String,
        record: String,
    },

    #[error("schema violation in {record}: {message}")]
    Schema { record: String, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),
}

impl DataError {
    pub(crate) fn schema(record: impl Into<String>, message: impl Into<String>) -> Self {
        DataError::Schema {
            record: record.into(),
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for DataError {
    fn from(err: serde_json::Error) -> Self {
        DataError::Parse {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;
