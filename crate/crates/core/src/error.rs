use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum EncpError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported group: {0}")]
    UnsupportedGroup(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("isotypic decomposition failed: {0}")]
    DecompositionFailure(String),

    #[error("batch too small: need at least {min} samples, got {got}")]
    BatchTooSmall { min: usize, got: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (first sample index {first_index}, size {size})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        first_index: usize,
        size: usize,
    },

    #[error("observable `{0}` is not registered")]
    UnregisteredObservable(String),

    #[error("conditioning set has zero empirical mass")]
    EmptyConditioningSet,

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = EncpError> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(EncpError::DimensionMismatch {
            expected,
            got,
            context,
        })
    }
}
