use std::path::PathBuf;

use chatprof_autograd::NnError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration or arguments.
    #[error("{0}")]
    Usage(String),
    /// Input data missing or unusable.
    #[error("{0}")]
    Data(String),
    /// Training or evaluation produced unusable numbers.
    #[error("{0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
            Error::Nn(NnError::Shape(_)) | Error::Nn(NnError::NonScalarLoss(..)) => 3,
            Error::Nn(_) => 2,
        }
    }
}
