use thiserror::Error;

pub type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("data length {len} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },

    #[error("gradient requested for non-scalar value of shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("target level {level} at index {index} is outside [0, {levels})")]
    TargetOutOfRange {
        index: usize,
        level: usize,
        levels: usize,
    },

    #[error("{0}")]
    Invalid(String),
}
