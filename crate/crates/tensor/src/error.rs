use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("index {index} out of range for {op} (len {len})")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
