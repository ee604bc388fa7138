use thiserror::Error;

/// Errors produced by the sampling and flow machinery.
#[derive(Debug, Error)]
pub enum CoreError {
    /// An argument violated a precondition (counts, ranges, empty input).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A vector had the wrong length for the operation.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// An affine flow with a zero scale entry has no inverse.
    #[error("singular flow: zero scale entry at coordinate {0}")]
    SingularFlow(usize),

    /// A backward scale evaluated to zero or a non-finite value.
    #[error("degenerate backward scale: {0}")]
    DegenerateScale(f64),

    /// A numeric quantity became non-finite.
    #[error("non-finite value in {context}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite {
        context: String,
        step: Option<usize>,
    },
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }

    pub fn non_finite(context: impl Into<String>, step: Option<usize>) -> Self {
        CoreError::NonFinite {
            context: context.into(),
            step,
        }
    }

    /// True for failures that a Metropolis chain treats as a rejected
    /// (infinite-energy) proposal rather than a fatal error.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            CoreError::NonFinite { .. } | CoreError::DegenerateScale(_)
        )
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<(), CoreError> {
    if expected == got {
        Ok(())
    } else {
        Err(CoreError::DimensionMismatch { expected, got })
    }
}
