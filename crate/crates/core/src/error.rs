use thiserror::Error;

/// Errors raised by the laboratory's numerical routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum HorlError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("index out of range: {what} = {index} (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("generator failed after {attempts} attempts: {constraint}")]
    GenerationFailed { attempts: usize, constraint: String },

    #[error("invariant violated: {0}")]
    InvariantViolated(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("matrix is numerically singular: {0}")]
    Singular(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("component not trained: {0}")]
    Untrained(&'static str),

    #[error("infinite concentration coefficient: the dataset does not cover a direction the comparator policy needs")]
    InfiniteCoverage,

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, HorlError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> HorlError {
    HorlError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn check_index(what: &'static str, index: usize, limit: usize) -> Result<()> {
    if index < limit {
        Ok(())
    } else {
        Err(HorlError::IndexOutOfRange { what, index, limit })
    }
}

impl From<serde_json::Error> for HorlError {
    fn from(e: serde_json::Error) -> Self {
        HorlError::Serialization(e.to_string())
    }
}
