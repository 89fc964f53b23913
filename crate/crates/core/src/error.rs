use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("problem does not support {0}")]
    Unsupported(&'static str),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter {
        name: &'static str,
        reason: &'static str,
    },
    #[error("step-size constraint violated: {constraint} (value {value})")]
    StepConstraint {
        constraint: &'static str,
        value: f64,
    },
    #[error("STORM step requires the previous iterate")]
    MissingPreviousIterate,
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),
    #[error("diverged at iteration {iteration} on device {device}: state norm {norm:e} exceeds {limit:e}")]
    Diverged {
        iteration: usize,
        device: usize,
        norm: f64,
        limit: f64,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: &'static str) -> Self {
        Error::InvalidParameter { name, reason }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        })
    }
}
