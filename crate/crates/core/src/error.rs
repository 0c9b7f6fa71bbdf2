use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ZapError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("empty sample")]
    EmptySample,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite {what} at hypothesis {index}")]
    NonFinite { index: usize, what: &'static str },
    #[error("degenerate model: {0}")]
    Degenerate(String),
}

impl ZapError {
    /// True for failures caused by the numerics rather than the caller's data.
    pub fn is_numeric(&self) -> bool {
        matches!(self, ZapError::NonFinite { .. } | ZapError::Degenerate(_))
    }
}

pub type Result<T> = std::result::Result<T, ZapError>;
