use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupted bundle: stored checksum {stored:#010x}, computed {computed:#010x}")]
    Corruption { stored: u32, computed: u32 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) => 1,
            Error::Io { .. }
            | Error::Format(_)
            | Error::Corruption { .. }
            | Error::Validation(_)
            | Error::Csv(_)
            | Error::Json(_) => 2,
            Error::NotApplicable(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}
