use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter vector or argument outside its admissible domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("no dose attains standardized shape value {value}")]
    NoSolution { value: f64 },

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("MED not estimable: {0}")]
    NotEstimable(String),

    #[error("singular information matrix: {0}")]
    SingularInformation(String),

    #[error("parameter leaves the admissible region: {0}")]
    OutOfRegion(String),

    #[error("weight {0} is not supported here")]
    UnsupportedWeight(String),

    #[error("{failed} of {total} bootstrap refits failed")]
    BootstrapFailures { failed: usize, total: usize },

    #[error("profile likelihood failed at dose {dose}: {reason}")]
    ProfileFailure { dose: f64, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that describe a failed fit rather than malformed input.
    pub fn is_fit_failure(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient(_)
                | Error::NotEstimable(_)
                | Error::SingularInformation(_)
                | Error::OutOfRegion(_)
                | Error::BootstrapFailures { .. }
                | Error::ProfileFailure { .. }
                | Error::NoSolution { .. }
        )
    }
}
