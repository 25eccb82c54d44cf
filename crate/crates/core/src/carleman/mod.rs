//! Carleman weight functions, the parameter formulas of the stability
//! theory, term-by-term quadrature of the weighted estimates and empirical
//! constant fitting.
//!
//! Weights are handled through their logarithms. Every weighted integral is
//! reported relative to `max_{Q_T} φ²`, whose logarithm is carried along as
//! `log_scale`, so ratios and margins stay exact when `φ²` overflows.

mod fit;
mod lemma;
mod terms;

pub use fit::{
    fit_and_verify, smallest_verified_k, FitReport, MarginRow, SampleOutcome, TestFamily, TraceMode,
};
pub use lemma::{lemma31_check, lemma31_check_with, HessianRoute, Lemma31Check};
pub use terms::{estimate_terms, EstimateId, EstimateParams, Side, Term, TermBreakdown, WeightChoice};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponents above this are reported only through their logarithm.
pub const LOG_OVERFLOW: f64 = 700.0;

/// `φ_{λ,k}(t) = exp(λ (t + b)^k)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weight1Params {
    pub b: f64,
    pub lambda: f64,
    pub k: f64,
}

/// `φ_λ(t) = exp((T − t + c)^λ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weight2Params {
    pub c: f64,
    pub lambda: f64,
    pub horizon: f64,
}

impl Weight1Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) {
            return Err(Error::InvalidParameter(format!("b must be positive, got {}", self.b)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidParameter(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.k > 2.0) {
            return Err(Error::InvalidParameter(format!("k must exceed 2, got {}", self.k)));
        }
        Ok(())
    }

    pub fn log_weight(&self, t: f64) -> f64 {
        self.lambda * (t + self.b).powf(self.k)
    }
}

impl Weight2Params {
    /// Checks `c > 2`, `T > 0` and `λ ≥ λ₀(T, c)` (or only `λ > 2` when
    /// `allow_below_threshold`).
    pub fn validate(&self, allow_below_threshold: bool) -> Result<()> {
        if !(self.c > 2.0) {
            return Err(Error::InvalidParameter(format!("c must exceed 2, got {}", self.c)));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {}", self.horizon)));
        }
        let l0 = lambda0(self.horizon, self.c);
        if allow_below_threshold {
            if !(self.lambda > 2.0) {
                return Err(Error::InvalidParameter(format!("lambda must exceed 2, got {}", self.lambda)));
            }
        } else if !(self.lambda >= l0) {
            return Err(Error::InvalidParameter(format!(
                "lambda = {} lies below lambda_0 = {l0}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn log_weight(&self, t: f64) -> f64 {
        (self.horizon - t + self.c).powf(self.lambda)
    }
}

/// A weight value with its logarithm; `value` is `+∞` when `overflow`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightValue {
    pub log_value: f64,
    pub value: f64,
    pub overflow: bool,
}

impl WeightValue {
    fn from_log(log_value: f64) -> Self {
        let overflow = !(log_value <= LOG_OVERFLOW);
        Self {
            log_value,
            value: if overflow { f64::INFINITY } else { log_value.exp() },
            overflow,
        }
    }
}

pub fn weight1(t: f64, p: &Weight1Params) -> WeightValue {
    WeightValue::from_log(p.log_weight(t))
}

pub fn weight2(t: f64, p: &Weight2Params) -> WeightValue {
    WeightValue::from_log(p.log_weight(t))
}

/// `c = 2 + √(T + 1/4)`.
pub fn default_c(horizon: f64) -> f64 {
    2.0 + (horizon + 0.25).sqrt()
}

/// `λ₀ = 16 (T + c)²`.
pub fn lambda0(horizon: f64, c: f64) -> f64 {
    16.0 * (horizon + c).powi(2)
}

/// Numbers fixed by `(T, ε, k, c)` in the stability theory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub horizon: f64,
    pub epsilon: f64,
    pub k: f64,
    pub c: f64,
    pub lambda0: f64,
    pub xi: f64,
    pub rho: f64,
    pub eta: f64,
}

impl ParameterSet {
    /// `λ(δ)` with `e^{3λ(T+1)^k} δ² = δ`.
    pub fn lambda_of_delta_p1(&self, delta: f64) -> Result<f64> {
        lambda_of_delta_p1(delta, self.horizon, self.k)
    }

    /// `λ(δ)` with `e^{3(T+c)^λ} δ² = δ`.
    pub fn lambda_of_delta_p2(&self, delta: f64) -> Result<f64> {
        lambda_of_delta_p2(delta, self.horizon, self.c)
    }
}

pub fn parameter_formulas(horizon: f64, epsilon: f64, k: f64, c: Option<f64>) -> Result<ParameterSet> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidParameter(format!("T must be positive, got {horizon}")));
    }
    if !(epsilon > 0.0 && epsilon < horizon) {
        return Err(Error::InvalidParameter(format!("epsilon must lie in (0, {horizon}), got {epsilon}")));
    }
    if !(k > 2.0) {
        return Err(Error::InvalidParameter(format!("k must exceed 2, got {k}")));
    }
    let c = c.unwrap_or_else(|| default_c(horizon));
    if !(c > 2.0) {
        return Err(Error::InvalidParameter(format!("c must exceed 2, got {c}")));
    }
    Ok(ParameterSet {
        horizon,
        epsilon,
        k,
        c,
        lambda0: lambda0(horizon, c),
        xi: (horizon + c) / (c * c),
        rho: ((epsilon + 1.0) / (horizon + 1.0)).powf(k) / 6.0,
        eta: (c + epsilon) / (6.0 * (horizon + c)),
    })
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

pub fn lambda_of_delta_p1(delta: f64, horizon: f64, k: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok((1.0 / delta).ln() / (3.0 * (horizon + 1.0).powf(k)))
}

pub fn lambda_of_delta_p2(delta: f64, horizon: f64, c: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(((1.0 / delta).ln() / 3.0).ln() / (horizon + c).ln())
}
