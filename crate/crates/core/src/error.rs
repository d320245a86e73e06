use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("time grids do not match: {0} steps vs {1} steps")]
    GridMismatch(usize, usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("enumeration guard exceeded: dim * n_steps = {actual} > {guard}")]
    EnumerationGuard { actual: usize, guard: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::NumericalFailure(msg.into())
    }

    /// True for errors caused by bad configuration or inputs rather than
    /// by the computation itself.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NumericalFailure(_))
    }
}
