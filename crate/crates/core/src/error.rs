use thiserror::Error;

/// Errors shared across the training stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrmError {
    /// A caller violated a shape or domain precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value at parameter index {index} ({context})")]
    NonFinite { index: usize, context: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("matrix is not positive definite (smallest eigenvalue {smallest_eigenvalue:e})")]
    NotPositiveDefinite { smallest_eigenvalue: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("dense materialization refused: dimension {dim} exceeds cap {cap}")]
    TooLarge { dim: usize, cap: usize },

    #[error("all step sizes diverged: {0:?}")]
    AllDiverged(Vec<f64>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for FrmError {
    fn from(e: std::io::Error) -> Self {
        FrmError::Io(e.to_string())
    }
}

impl From<csv::Error> for FrmError {
    fn from(e: csv::Error) -> Self {
        FrmError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, FrmError>;

pub(crate) fn contract(msg: impl Into<String>) -> FrmError {
    FrmError::Contract(msg.into())
}
