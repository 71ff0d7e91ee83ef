use thiserror::Error;

/// Errors raised across the crate.
///
/// Each variant maps to a stable process exit code via [`AfmError::exit_code`].
#[derive(Debug, Error)]
pub enum AfmError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("degenerate batch: all importance weights are zero")]
    DegenerateBatch,
    #[error("round aborted: {0}")]
    RoundAbort(String),
    #[error("landscape construction failed: {0}")]
    Landscape(String),
    #[error("sampling budget exhausted: {0}")]
    Exhausted(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl AfmError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AfmError::Config(_) => 2,
            AfmError::Domain(_) | AfmError::Shape { .. } => 3,
            AfmError::Numerical(_) | AfmError::DegenerateBatch => 4,
            AfmError::RoundAbort(_) => 5,
            AfmError::Landscape(_) | AfmError::Exhausted(_) => 6,
            AfmError::Checkpoint(_) | AfmError::Io(_) | AfmError::Csv(_) => 7,
        }
    }

    pub(crate) fn shape(expected: usize, actual: usize) -> Self {
        AfmError::Shape { expected, actual }
    }
}

pub type Result<T> = std::result::Result<T, AfmError>;
