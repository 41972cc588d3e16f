use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: expected a {expected} artifact, found {found}")]
    WrongArtifact {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] ecg_aging::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    /// 1 for usage errors, 3 for numerical failures, 2 for everything the
    /// data is to blame for.
    pub fn exit_code(&self) -> u8 {
        use ecg_aging::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(E::Numerical(_) | E::NoScorableClass | E::RetryCapExceeded(_)) => 3,
            _ => 2,
        }
    }
}
