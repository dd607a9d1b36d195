use thiserror::Error;

/// Errors raised by the estimation toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:e}, max {max_eig:e})")]
    NotPsd { min_eig: f64, max_eig: f64 },

    #[error("weight matrix is singular (reciprocal condition {rcond:e})")]
    SingularWeight { rcond: f64 },

    #[error("model-implied covariance is singular or not positive definite")]
    SingularModel,

    #[error("information matrix is singular")]
    SingularInformation,

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("adjusted statistic is degenerate: {0}")]
    DegenerateStatistic(String),

    #[error("metric is undefined: {0}")]
    UndefinedMetric(String),

    #[error("population construction failed: {0}")]
    Construction(String),

    #[error("cannot tune: {0}")]
    CannotTune(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
