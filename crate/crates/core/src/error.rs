use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("covariance is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("covariance is not positive semidefinite (eigenvalue {eigenvalue:e})")]
    NotPsd { eigenvalue: f64 },

    #[error("factorization reproduces the covariance only to {max_error:e}")]
    FactorizationInaccurate { max_error: f64 },

    #[error("points {first} and {second} coincide (distance {distance:e})")]
    DistinctnessViolation {
        first: usize,
        second: usize,
        distance: f64,
    },

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("SNR grid ends at {grid_end} before the certified truncation point {s_max}")]
    TailNotCertified { s_max: f64, grid_end: f64 },

    #[error("scaling iterations did not converge after {iterations} steps (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("exhaustive enumeration limited to {limit} points, got {size}")]
    TooLarge { size: usize, limit: usize },

    #[error("malformed step function: {0}")]
    MalformedStep(String),

    #[error("bad parameters: {0}")]
    BadParams(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
