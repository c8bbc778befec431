use thiserror::Error;

/// Errors raised by the library.
///
/// Variants up to `Format` describe bad input and map to the CLI's validation
/// exit code; the rest are runtime failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("{0}")]
    Divisibility(String),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("requested time {requested} is beyond the simulated horizon {horizon}")]
    Horizon { requested: u64, horizon: u64 },
    #[error("state space of {states} sites exceeds the cap of {cap}")]
    TooLarge { states: usize, cap: usize },
    #[error("malformed input: {0}")]
    Format(String),
    #[error("solver failed: {0}")]
    Solver(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Solver(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
