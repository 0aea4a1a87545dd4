use thiserror::Error;

/// Errors raised by estimation, simulation and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive definite: leading minor {minor} has pivot {pivot:e}")]
    NotPositiveDefinite { minor: usize, pivot: f64 },

    #[error("state {state}: observed covariance block is singular for pattern {pattern}")]
    SingularObservedBlock { state: usize, pattern: String },

    #[error("subject {subject}, time {time}: observation has zero probability under every state")]
    ImpossibleObservation { subject: usize, time: usize },

    #[error("state {state}, row {row}: singular autoregressive system")]
    SingularRowSystem { state: usize, row: usize },

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("all {starts} starts failed; first error: {first}")]
    AllStartsFailed { starts: usize, first: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that come from the numerics rather than malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::SingularObservedBlock { .. }
                | Error::ImpossibleObservation { .. }
                | Error::SingularRowSystem { .. }
                | Error::AllStartsFailed { .. }
                | Error::Numeric(_)
                | Error::Initialization(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
