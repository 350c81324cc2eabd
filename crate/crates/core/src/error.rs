use thiserror::Error;

use crate::model::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} is outside [{start}, {end}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient sample: need at least {needed} particles, got {got}")]
    InsufficientSample { needed: usize, got: usize },

    /// U or V lost positive definiteness (or became numerically singular).
    #[error("riccati breakdown at t = {t}: {matrix} has smallest eigenvalue {eigenvalue:e}")]
    RiccatiBreakdown {
        t: f64,
        matrix: &'static str,
        eigenvalue: f64,
    },

    #[error("invalid model:\n{0}")]
    InvalidModel(ValidationReport),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("moment propagation unstable at t = {t}: covariance eigenvalue {eigenvalue:e}")]
    Instability { t: f64, eigenvalue: f64 },

    #[error("particle system diverged at step {step}")]
    Divergence { step: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
