use std::fmt;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(
        "matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e}, largest {max_eigenvalue:e})"
    )]
    NotPsd { min_eigenvalue: f64, max_eigenvalue: f64 },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("zero denominator in coordinate {index}")]
    ZeroDenominator { index: usize },

    #[error("non-finite optimizer state after step {step}")]
    NonFiniteStep { step: u64 },

    #[error("non-finite SDE state at t = {time}")]
    NonFiniteTime { time: f64 },

    #[error("u[{index}] = {value:e} <= 0 at t = {time}; use the auxiliary (clamped) system or a smaller dt")]
    NonPositiveU { index: usize, value: f64, time: f64 },

    #[error("noise is undefined: {0}")]
    UndefinedNoise(String),

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid configuration:\n{0}")]
    Config(ConfigErrors),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Every validation problem found in an experiment file, not just the first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  - {e}")?;
        }
        Ok(())
    }
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
