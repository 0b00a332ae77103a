//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value passed to an operation violates its contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration is structurally unusable (empty cell, bad grid, ...).
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    /// Kernel weights degenerate to zero everywhere.
    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    /// A fit produced an unusable model (e.g. nonpositive variance curve).
    #[error("fit failure: {0}")]
    FitFailure(String),

    /// A numeric procedure broke down (negative variance estimate, ...).
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    /// A metric is undefined for the given data (empty histogram side, ...).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Input data does not match the expected schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Too few events survive to run a meaningful test.
    #[error("low statistics: {0}")]
    LowStatistics(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 invalid configuration, 3 data/schema error,
    /// 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::InvalidConfiguration(_) => 2,
            Error::Schema(_) | Error::Csv(_) | Error::Io(_) | Error::LowStatistics(_) => 3,
            Error::DegenerateWeights(_)
            | Error::FitFailure(_)
            | Error::NumericFailure(_)
            | Error::UndefinedMetric(_)
            | Error::Json(_) => 4,
        }
    }
}
