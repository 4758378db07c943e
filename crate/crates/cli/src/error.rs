use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Numeric(#[from] bittrace_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        CliError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit status: 1 usage, 2 I/O, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } | CliError::Format { .. } => 2,
            CliError::Numeric(bittrace_core::Error::Io(_)) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}
