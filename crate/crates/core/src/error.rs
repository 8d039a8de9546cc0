use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("operator is not symmetric (asymmetry {asymmetry:e} exceeds tolerance {tolerance:e})")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },
    #[error("operator is not positive semidefinite (eigenvalue {eigenvalue:e})")]
    NotPositiveSemidefinite { eigenvalue: f64 },
    #[error("invalid noise spec: {0}")]
    InvalidSpec(String),
    #[error("Q_M undefined off support (step {step}, cell {cell})")]
    OffSupport { step: usize, cell: usize },
    #[error("time {0} is not a grid point")]
    NonGridTime(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("provenance mismatch: {0}")]
    Provenance(String),
    #[error("integrand is not deterministic; use the per-path variant")]
    NotDeterministic,
    #[error("gradient check failed for `{function}`: {detail}")]
    GradientCheck { function: String, detail: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
