use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The variants are grouped so the CLI can map them onto exit codes:
/// parameter and configuration problems are validation failures, the rest
/// are numerical or I/O failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("infeasible degree sequence: {0}")]
    InfeasibleDegrees(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("did not converge after {iterations} iterations: {what}")]
    NoConvergence { what: String, iterations: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input rather than by the computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter { .. } | Error::InfeasibleDegrees(_) | Error::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
