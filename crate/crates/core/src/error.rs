use thiserror::Error;

/// Errors raised by the coefficient model, the engines and the diagnostics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("unsupported dimension {0} (supported: 1..={max})", max = crate::MAX_DIM)]
    UnsupportedDimension(usize),

    #[error("non-finite value in {what} at t={t}, x={x:?}")]
    NonFinite { what: &'static str, t: f64, x: Vec<f64> },

    #[error("diffusion matrix is not symmetric at t={t}, x={x:?}: asymmetry {asymmetry:e}")]
    Asymmetric { t: f64, x: Vec<f64>, asymmetry: f64 },

    #[error("degenerate diffusion: eigenvalue {eigenvalue:e} below floor {floor:e}")]
    DegenerateDiffusion { eigenvalue: f64, floor: f64 },

    #[error("particle {index} diverged at t={t} (position {position:?})")]
    Diverged {
        index: usize,
        t: f64,
        position: Vec<f64>,
    },

    #[error("invalid parameters: {}", .0.join("; "))]
    InvalidParams(Vec<String>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("unsupported query: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("malformed snapshot: {0}")]
    Snapshot(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
