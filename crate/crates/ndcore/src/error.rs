use thiserror::Error;

pub type Result<T> = std::result::Result<T, NdError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("shape {shape:?} holds {} elements but {len} were given", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },

    #[error("expected a scalar, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },

    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },

    #[error("{what}: {value} is not divisible by {divisor}")]
    NotDivisible { what: &'static str, value: usize, divisor: usize },

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("{op}: index {index} out of range (len {len})")]
    Index { op: &'static str, index: usize, len: usize },

    #[error("{op}: labels must be 0 or 1, found {value}")]
    NonBinaryLabel { op: &'static str, value: f64 },
}
