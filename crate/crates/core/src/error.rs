use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    InvalidData {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite entry at flat index {index}")]
    NonFinite { index: usize },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: ||A - A^T||_F = {asymmetry:e}")]
    NotSymmetric { asymmetry: f64 },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("gamma must lie in [0, 1], got {0}")]
    InvalidGamma(f64),
    #[error("kernel size must be odd and positive, got {0}")]
    InvalidKernelSize(usize),
    #[error("invalid entanglement spec: {0}")]
    InvalidSpec(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
