//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or unreadable input data.
    #[error("input error: {0}")]
    Input(String),
    /// Inconsistent option combinations or argument values.
    #[error("usage error: {0}")]
    Usage(String),
    /// The panel does not satisfy a design restriction required by the estimators.
    #[error("design restriction not satisfied: {0}")]
    Design(String),
    /// Estimation cannot proceed (e.g. no estimable switcher at any horizon).
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for input/usage problems, 3 for
    /// design-restriction failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Usage(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
            Error::Design(_) => 3,
            Error::Estimation(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
