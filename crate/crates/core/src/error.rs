use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("solver did not converge within {iters} iterations")]
    MaxItersExceeded { iters: usize },

    #[error("invalid step sizes: tau*sigma*|K|^2 = {product:.6} must be below 1")]
    InvalidStepSizes { product: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("KKT system is singular")]
    SingularKkt,

    #[error("no active pattern admits a KKT point (infeasible)")]
    Infeasible,

    #[error("problem too large for active-set enumeration ({0} patterns tried)")]
    TooLarge(usize),

    #[error("reference solver made no progress after {0} outer iterations")]
    NoProgress(usize),

    #[error("linear term is not in the range of the quadratic form (residual {0:.3e})")]
    RangeViolation(f64),

    #[error("squared radius is negative ({0:.3e}) somewhere on the parameter box")]
    NegativeRadius(f64),

    #[error("quadratic form is not positive semidefinite (min eigenvalue {0:.3e})")]
    NotPsd(f64),

    #[error("adjoint linear solve did not converge (residual {0:.3e})")]
    AdjointNotConverged(f64),

    #[error("training produced non-finite values at epoch {0}")]
    TrainingNonFinite(usize),

    #[error("division by zero: {0}")]
    DivideByZero(&'static str),

    #[error("io error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.to_string())
        } else {
            Error::Parse(format!("line {} column {}: {}", e.line(), e.column(), e))
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
