//! Run configuration: TOML schema, defaults and range checks.

use serde::{Deserialize, Serialize};

use mfglab::carleman::{default_c, lambda0, EstimateId, TraceMode};
use mfglab::grid::GridSpec;
use mfglab::scenario::ProblemSpec;
use mfglab::spectral::Spectrum;
use mfglab::stability_lab::{DataTarget, ProblemId};

/// Schema or range violation, reported with the offending key path.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

fn bad(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { path: path.to_string(), message: message.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Solve,
    Verify,
    Stability,
    Reconstruct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub output: Option<String>,
    pub grid: GridSpec,
    #[serde(default)]
    pub problem: ProblemSpec,
    /// Picard options for `solve` and `stability`.
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub verify: Option<VerifyBlock>,
    #[serde(default)]
    pub stability: Option<StabilityBlock>,
    #[serde(default)]
    pub reconstruct: Option<ReconstructBlock>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverBlock {
    pub max_outer_iters: usize,
    pub theta: f64,
    pub tol_res: f64,
    pub linear_tol: f64,
}

impl Default for SolverBlock {
    fn default() -> Self {
        Self { max_outer_iters: 200, theta: 0.5, tol_res: 1e-10, linear_tol: 1e-14 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyBlock {
    pub count: usize,
    pub max_modes: usize,
    pub max_wavenumber: usize,
    pub amplitude: f64,
    pub trace_mode: TraceMode,
}

impl Default for FamilyBlock {
    fn default() -> Self {
        Self { count: 20, max_modes: 8, max_wavenumber: 8, amplitude: 1.0, trace_mode: TraceMode::VanishAtData }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LemmaBlock {
    pub fields: usize,
    pub spectrum: Spectrum,
    pub tolerance: f64,
}

impl Default for LemmaBlock {
    fn default() -> Self {
        Self { fields: 50, spectrum: Spectrum::default(), tolerance: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyBlock {
    pub estimates: Vec<EstimateId>,
    #[serde(default)]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default = "default_b")]
    pub b: f64,
    /// Filled with `2 + √(T + 1/4)` when absent.
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default = "default_k0")]
    pub k0: f64,
    #[serde(default)]
    pub allow_below_threshold: bool,
    #[serde(default)]
    pub family: FamilyBlock,
    #[serde(default)]
    pub lemma: LemmaBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityBlock {
    pub problem_id: ProblemId,
    pub epsilon: f64,
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default = "default_delta0")]
    pub delta0: f64,
    pub delta_levels: Vec<f64>,
    #[serde(default = "all_targets")]
    pub targets: Vec<DataTarget>,
    #[serde(default)]
    pub spectrum: Spectrum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructBlock {
    pub problem_id: ProblemId,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Defaults to 2 for P1 and to `λ₀` (then clipped) for P2.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default = "default_b")]
    pub b: f64,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_outer")]
    pub outer_iters: usize,
    #[serde(default = "default_cg")]
    pub cg_max_iters: usize,
    #[serde(default = "default_cg")]
    pub cg_budget: usize,
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_log_range")]
    pub max_log_range: f64,
    #[serde(default = "default_noise_alpha")]
    pub noise_alpha_factor: f64,
    #[serde(default = "default_noise_levels")]
    pub delta_levels: Vec<f64>,
    #[serde(default)]
    pub spectrum: Spectrum,
    #[serde(default = "default_error_tolerance")]
    pub error_tolerance: f64,
    /// Sources computed from the discrete operators, so the manufactured
    /// fields solve the discrete system exactly.
    #[serde(default = "default_true")]
    pub consistent_sources: bool,
}

fn default_k() -> f64 {
    3.0
}
fn default_b() -> f64 {
    1.0
}
fn default_k0() -> f64 {
    4.0
}
fn default_delta0() -> f64 {
    0.1
}
fn default_epsilon() -> f64 {
    0.2
}
fn default_alpha() -> f64 {
    1e-8
}
fn default_outer() -> usize {
    20
}
fn default_cg() -> usize {
    200
}
fn default_cg_tol() -> f64 {
    1e-10
}
fn default_grad_tol() -> f64 {
    1e-12
}
fn default_log_range() -> f64 {
    40.0
}
fn default_noise_alpha() -> f64 {
    1e-6
}
fn default_noise_levels() -> Vec<f64> {
    vec![1e-2, 1e-3, 1e-4]
}
fn default_error_tolerance() -> f64 {
    1e-2
}
fn default_true() -> bool {
    true
}
fn all_targets() -> Vec<DataTarget> {
    vec![DataTarget::M0, DataTarget::UT, DataTarget::G1, DataTarget::G2]
}

/// Parses, fills defaults and validates ranges.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let de = toml::Deserializer::new(text);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        bad(if path.is_empty() || path == "." { "<root>" } else { &path }, e.into_inner().message().trim().to_string())
    })?;
    cfg.resolve()?;
    Ok(cfg)
}

fn check_k(path: &str, k: f64) -> Result<(), ConfigError> {
    if !(k > 2.0) {
        return Err(bad(path, format!("k must exceed 2 (validity range of the polynomial Carleman weight), got {k}")));
    }
    Ok(())
}

fn check_c(path: &str, c: f64) -> Result<(), ConfigError> {
    if !(c > 2.0) {
        return Err(bad(path, format!("c must exceed 2 (validity range of the power Carleman weight), got {c}")));
    }
    Ok(())
}

fn check_epsilon(path: &str, eps: f64, horizon: f64) -> Result<(), ConfigError> {
    if !(eps > 0.0 && eps < horizon) {
        return Err(bad(path, format!("epsilon must lie in (0, T) = (0, {horizon}), got {eps}")));
    }
    Ok(())
}

fn check_levels(path: &str, levels: &[f64]) -> Result<(), ConfigError> {
    if levels.is_empty() {
        return Err(bad(path, "at least one delta level is required"));
    }
    for &d in levels {
        if !(d > 0.0) || !d.is_finite() {
            return Err(bad(path, format!("delta levels must be positive, got {d}")));
        }
    }
    if levels.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(bad(path, "delta levels must be strictly decreasing"));
    }
    Ok(())
}

impl RunConfig {
    fn resolve(&mut self) -> Result<(), ConfigError> {
        let horizon = self.grid.horizon;
        if !(horizon > 0.0) {
            return Err(bad("grid.horizon", format!("T must be positive, got {horizon}")));
        }
        self.grid.build().map_err(|e| bad("grid", e.to_string()))?;
        let s = &self.solver;
        if !(s.theta > 0.0 && s.theta <= 1.0) {
            return Err(bad("solver.theta", format!("damping must lie in (0, 1], got {}", s.theta)));
        }
        if !(s.tol_res > 0.0) || !(s.linear_tol > 0.0) {
            return Err(bad("solver", "tolerances must be positive"));
        }
        if s.max_outer_iters == 0 {
            return Err(bad("solver.max_outer_iters", "must be at least 1"));
        }
        let blocks = [
            ("verify", self.verify.is_some(), Command::Verify),
            ("stability", self.stability.is_some(), Command::Stability),
            ("reconstruct", self.reconstruct.is_some(), Command::Reconstruct),
        ];
        for (name, present, cmd) in blocks {
            if present && cmd != self.command {
                return Err(bad(name, format!("block is not used by command {:?}", self.command).to_lowercase()));
            }
            if !present && cmd == self.command {
                return Err(bad(name, "missing block required by the command"));
            }
        }
        if let Some(v) = &mut self.verify {
            if v.estimates.is_empty() {
                return Err(bad("verify.estimates", "list at least one estimate"));
            }
            let needs_lambda = v.estimates.iter().any(|e| *e != EstimateId::L31);
            if needs_lambda {
                if v.lambdas.is_empty() {
                    return Err(bad("verify.lambdas", "the lambda sweep is empty"));
                }
                if let Some(l) = v.lambdas.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
                    return Err(bad("verify.lambdas", format!("lambda must be positive, got {l}")));
                }
            }
            check_k("verify.k", v.k)?;
            if !(v.b > 0.0) {
                return Err(bad("verify.b", format!("b must be positive, got {}", v.b)));
            }
            let c = *v.c.get_or_insert(default_c(horizon));
            check_c("verify.c", c)?;
            if v.family.count < 2 {
                return Err(bad("verify.family.count", "the train/holdout split needs at least two functions"));
            }
            if v.estimates.contains(&EstimateId::L31) {
                if v.lemma.fields == 0 {
                    return Err(bad("verify.lemma.fields", "must be at least 1"));
                }
                v.lemma.spectrum.validate().map_err(|e| bad("verify.lemma.spectrum", e.to_string()))?;
            }
        }
        if let Some(st) = &mut self.stability {
            check_epsilon("stability.epsilon", st.epsilon, horizon)?;
            check_k("stability.k", st.k)?;
            let c = *st.c.get_or_insert(default_c(horizon));
            check_c("stability.c", c)?;
            if !(st.delta0 > 0.0 && st.delta0 < 1.0) {
                return Err(bad("stability.delta0", format!("delta_0 must lie in (0, 1), got {}", st.delta0)));
            }
            check_levels("stability.delta_levels", &st.delta_levels)?;
            if st.delta_levels.len() < 4 {
                return Err(bad("stability.delta_levels", "the slope fit needs at least 4 levels"));
            }
            if let Some(d) = st.delta_levels.iter().find(|d| **d > st.delta0) {
                return Err(bad("stability.delta_levels", format!("level {d} exceeds delta0 = {}", st.delta0)));
            }
            if st.targets.is_empty() {
                return Err(bad("stability.targets", "choose at least one data target"));
            }
            st.spectrum.validate().map_err(|e| bad("stability.spectrum", e.to_string()))?;
        }
        if let Some(r) = &mut self.reconstruct {
            check_epsilon("reconstruct.epsilon", r.epsilon, horizon)?;
            check_k("reconstruct.k", r.k)?;
            let c = *r.c.get_or_insert(default_c(horizon));
            check_c("reconstruct.c", c)?;
            let lambda = *r.lambda.get_or_insert(match r.problem_id {
                ProblemId::P1 => 2.0,
                ProblemId::P2 => lambda0(horizon, c),
            });
            if !(lambda > 0.0) || !lambda.is_finite() {
                return Err(bad("reconstruct.lambda", format!("lambda must be positive, got {lambda}")));
            }
            if r.problem_id == ProblemId::P2 && !(lambda > 2.0) {
                return Err(bad("reconstruct.lambda", format!("the power weight needs lambda > 2, got {lambda}")));
            }
            if !(r.alpha >= 0.0) || !r.alpha.is_finite() {
                return Err(bad("reconstruct.alpha", format!("alpha must be non-negative, got {}", r.alpha)));
            }
            check_levels("reconstruct.delta_levels", &r.delta_levels)?;
            r.spectrum.validate().map_err(|e| bad("reconstruct.spectrum", e.to_string()))?;
        }
        Ok(())
    }
}
