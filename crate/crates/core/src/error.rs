use thiserror::Error;

/// Errors raised by the estimation and verification routines.
#[derive(Debug, Error)]
pub enum PanelError {
    /// Input violates a documented precondition (dimensions, finiteness, ranges).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A matrix that must be invertible or well conditioned is not.
    #[error("numeric degeneracy: {0}")]
    Degenerate(String),

    /// The likelihood or an iterate became non-finite or ran away.
    #[error("likelihood divergence: {0}")]
    Divergence(String),

    /// The alternating fixed-effects scheme increased its objective.
    #[error("objective increased: {0}")]
    NonMonotone(String),
}

pub type Result<T> = std::result::Result<T, PanelError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(PanelError::InvalidInput(msg.into()))
}
