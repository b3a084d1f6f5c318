use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parameter registered twice: {0}")]
    DuplicateParam(String),
    #[error("unknown parameter: {0}")]
    UnknownParam(String),
    #[error("backward called before any forward operation was recorded")]
    BackwardBeforeForward,
    #[error("backward requires a 1x1 loss, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
