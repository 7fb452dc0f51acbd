use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ExpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ExpError {
    /// Invalid configuration; `path` is the dotted field path.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset format error: {0}")]
    Format(String),

    #[error("{0}")]
    Core(#[from] fedsim_core::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl ExpError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        ExpError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ExpError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration errors, 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use fedsim_core::Error as E;
        match self {
            ExpError::Config { .. } => 2,
            ExpError::Core(E::NonFiniteParams { .. } | E::NonFinite { .. }) => 3,
            ExpError::Core(E::ClientFailed { source, .. })
                if matches!(**source, E::NonFinite { .. }) =>
            {
                3
            }
            _ => 1,
        }
    }
}
