use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config {field}: {message}")]
    Config { field: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: line {line}, column {column}: {message}", path.display())]
    Csv {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] ceboost_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for usage, configuration and input problems, 2 for numerical
    /// failures during a run.
    pub fn exit_code(&self) -> i32 {
        use ceboost_core::Error as E;
        match self {
            CliError::Core(
                E::InvalidParameter(_)
                | E::DimensionMismatch { .. }
                | E::TermNotInLibrary { .. }
                | E::InvalidTimeStep(_)
                | E::BatchTooShort { .. },
            ) => 1,
            CliError::Core(_) => 2,
            _ => 1,
        }
    }
}
