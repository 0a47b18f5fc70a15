use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        what: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("{name} is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { name: String, asymmetry: f64 },

    #[error("{name} is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { name: String, min_eigenvalue: f64 },

    #[error("{name} is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { name: String, min_eigenvalue: f64 },

    #[error("step {step} is beyond the schedule horizon {horizon}")]
    HorizonExceeded { step: usize, horizon: usize },

    #[error("{what} is singular")]
    Singular { what: String },

    #[error("{what} produced non-finite values")]
    NonFinite { what: String },

    #[error("insufficient samples for {what}: need at least {needed}, got {got}")]
    InsufficientSamples {
        what: String,
        needed: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed data: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dims(
        what: impl Into<String>,
        expected: (usize, usize),
        found: (usize, usize),
    ) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            found,
        }
    }
}
