use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DisaggError> = std::result::Result<T, E>;

/// Failures surfaced by the library.
///
/// Input and configuration problems are kept apart from numerical failures so
/// callers (the CLI in particular) can map them to distinct exit statuses.
#[derive(Debug, Error)]
pub enum DisaggError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl DisaggError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DisaggError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        DisaggError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        DisaggError::Validation(message.into())
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        DisaggError::Numerical(message.into())
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, DisaggError::Numerical(_))
    }
}
