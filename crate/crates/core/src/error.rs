use thiserror::Error;

/// Errors raised by the inference, parametrization and training routines.
#[derive(Debug, Error)]
pub enum LmcError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    /// A Cholesky factorization failed even after the jitter schedule was exhausted.
    #[error("numerical degeneracy while factorizing {what} (last jitter tried: {jitter:e})")]
    NumericalDegeneracy { what: String, jitter: f64 },

    #[error("noise matrix is not positive definite: {0}")]
    IndefiniteNoise(String),

    #[error("dense path refused: n*p = {np} exceeds the limit of {limit}")]
    SizeGuard { np: usize, limit: usize },

    #[error("training aborted at iteration {iteration}: {reason}")]
    TrainingAborted { iteration: usize, reason: String },

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LmcError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(LmcError::InvalidInput(msg.into()))
}

pub(crate) fn check_dims(
    context: &str,
    expected: (usize, usize),
    actual: (usize, usize),
) -> Result<()> {
    if expected != actual {
        return Err(LmcError::DimensionMismatch {
            context: context.to_string(),
            expected: format!("{}x{}", expected.0, expected.1),
            actual: format!("{}x{}", actual.0, actual.1),
        });
    }
    Ok(())
}
