use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint fingerprint mismatch: checkpoint {checkpoint}, hierarchy {hierarchy}")]
    Fingerprint {
        checkpoint: String,
        hierarchy: String,
    },

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 capability.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) | Error::Schema(_) => 2,
            Error::Capability(_) | Error::Fingerprint { .. } => 4,
            Error::Parse { .. }
            | Error::Format(_)
            | Error::NonFinite { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_) => 3,
        }
    }
}
