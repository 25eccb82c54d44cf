use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("time {t} lies outside [{t0}, {t1}]")]
    RegionOutOfRange { t: f64, t0: f64, t1: f64 },
    #[error("time slab [{t_lo}, {t_hi}] holds fewer than 3 time nodes after snapping")]
    EmptySlab { t_lo: f64, t_hi: f64 },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("Neumann condition violated: {0}")]
    Neumann(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("linear solve failed: {0}")]
    LinearSolve(String),
    #[error("blow-up in {equation} at time index {step}: sup norm {sup} exceeds {limit}")]
    BlowUp {
        equation: &'static str,
        step: usize,
        sup: f64,
        limit: f64,
    },
    #[error("Picard iteration failed to converge on {0}")]
    NotConverged(String),
    #[error("{0}")]
    Experiment(String),
}

impl Error {
    /// True for failures of the numerics themselves (as opposed to bad input).
    pub fn is_numerical_abort(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::LinearSolve(_) | Error::BlowUp { .. } | Error::NotConverged(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
