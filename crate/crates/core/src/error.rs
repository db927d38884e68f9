//! Error type shared by every module.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive semidefinite: smallest eigenvalue {0:.3e}")]
    NotPsd(f64),

    #[error("matrix is numerically singular (sigma_min/sigma_max = {0:.3e})")]
    Singular(f64),

    #[error("invalid interval: s = {s} exceeds t = {t}")]
    InvalidInterval { s: f64, t: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("eigenvalue containment violated: {0}")]
    Containment(String),

    #[error("bound violated: {0}")]
    BoundViolation(String),

    #[error("plan infeasible: {0}")]
    Infeasible(String),

    #[error("index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("system too large for dense materialization: {0} rows")]
    TooLarge(usize),

    #[error("empty list")]
    EmptyList,

    #[error("model assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 1 for configuration problems, 2 for bound failures, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) | Error::InvalidInput(_) | Error::Infeasible(_) => 1,
            Error::BoundViolation(_) | Error::Containment(_) | Error::AssumptionViolated(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
