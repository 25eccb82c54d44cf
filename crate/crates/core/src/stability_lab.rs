//! Hölder stability experiments.
//!
//! Pairs of solutions are produced by the well-posed conventional solver with
//! data perturbed by smooth random Neumann fields of prescribed size, then
//! read as terminal-data (P1) or initial-data (P2) pairs. The measured data
//! distance `δ` and the restricted error norms are then compared with the
//! Hölder floor `C · amplification · δ^ρ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::carleman::{lambda0, lambda_of_delta_p1, lambda_of_delta_p2, parameter_formulas};
use crate::error::{Error, Result};
use crate::forward_solver::{solve_conventional, PicardOptions, SolveReport};
use crate::grid::{norm, spatial_norm, Field, Grid, GridSpec, NormKind, Region, SpatialField};
use crate::mfg_system::MfgProblem;
use crate::spectral::{random_cosine_field, Spectrum};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProblemId {
    /// Terminal data `u(·, T)`, `m(·, T)`.
    P1,
    /// Initial data `u(·, 0)`, `m(·, 0)`.
    P2,
}

/// Seeded random Neumann field, optionally rescaled to an exact norm.
///
/// `target = Some((kind, value))` rescales to `‖·‖_kind = value`, with `kind`
/// one of `L2OmegaAt` or `H1OmegaAt`.
pub fn random_neumann_field(
    grid: &Grid,
    spectrum: &Spectrum,
    seed: u64,
    target: Option<(NormKind, f64)>,
) -> Result<SpatialField> {
    let f = random_cosine_field(grid, spectrum, seed)?;
    match target {
        None => Ok(f),
        Some((kind, value)) => {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(Error::InvalidParameter(format!("target norm must be non-negative, got {value}")));
            }
            let current = spatial_norm(&f, kind)?;
            if value == 0.0 {
                return Ok(f.scale(0.0));
            }
            if current == 0.0 {
                return Err(Error::InvalidParameter("cannot rescale a zero field to a nonzero norm".into()));
            }
            Ok(f.scale(value / current))
        }
    }
}

/// Which conventional data and sources are perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataTarget {
    /// Initial density, scaled in `L₂(Ω)`.
    M0,
    /// Terminal value function, scaled in `H¹(Ω)`.
    UT,
    /// HJB source, scaled in `L₂(Q_T)`.
    G1,
    /// Fokker–Planck source, scaled in `L₂(Q_T)`.
    G2,
}

impl DataTarget {
    fn index(&self) -> u64 {
        match self {
            DataTarget::M0 => 0,
            DataTarget::UT => 1,
            DataTarget::G1 => 2,
            DataTarget::G2 => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub seed: u64,
    #[serde(default)]
    pub spectrum: Spectrum,
    /// Strictly decreasing, positive, below `δ₀`.
    pub delta_levels: Vec<f64>,
    pub targets: Vec<DataTarget>,
}

impl PerturbationSpec {
    pub fn validate(&self, delta0: f64) -> Result<()> {
        self.spectrum.validate()?;
        if !(delta0 > 0.0 && delta0 < 1.0) {
            return Err(Error::InvalidParameter(format!("delta_0 must lie in (0, 1), got {delta0}")));
        }
        for &d in &self.delta_levels {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::InvalidParameter(format!("delta levels must be positive, got {d}")));
            }
            if d > delta0 {
                return Err(Error::InvalidParameter(format!("delta level {d} exceeds delta_0 = {delta0}")));
            }
        }
        if self.delta_levels.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidParameter("delta levels must be strictly decreasing".into()));
        }
        Ok(())
    }

    fn field_seed(&self, t: DataTarget) -> u64 {
        self.seed.wrapping_mul(4).wrapping_add(t.index())
    }
}

/// Conventional data of the base configuration.
#[derive(Clone, Debug)]
pub struct StabilityBase {
    pub problem: MfgProblem,
    pub u_terminal: SpatialField,
    pub m_initial: SpatialField,
    pub options: PicardOptions,
}

/// One computed solution with its solver report.
#[derive(Clone, Debug)]
pub struct Solution {
    pub u: Field,
    pub m: Field,
    pub report: SolveReport,
}

/// Components of the data distance and their maximum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasuredDelta {
    /// `‖Δu(·, t*)‖_{H¹(Ω)}` with `t* = T` (P1) or `0` (P2).
    pub u_data: f64,
    /// `‖Δm(·, t*)‖_{L₂(Ω)}`.
    pub m_data: f64,
    pub g1: f64,
    pub g2: f64,
}

impl MeasuredDelta {
    pub fn max(&self) -> f64 {
        self.u_data.max(self.m_data).max(self.g1).max(self.g2)
    }
}

pub struct Pair {
    pub first: Solution,
    pub second: Solution,
    pub measured: MeasuredDelta,
    /// Both solutions lie in `K₃ × K₄`.
    pub admissible: bool,
}

fn solve(problem: &MfgProblem, u_t: &SpatialField, m_0: &SpatialField, opts: &PicardOptions) -> Result<Solution> {
    let (u, m, report) = solve_conventional(problem, u_t, m_0, opts)?;
    if !report.converged {
        return Err(Error::NotConverged(format!(
            "Picard iteration stopped at residual {:.3e} after {} sweeps",
            report.final_residual(),
            report.iterations
        )));
    }
    Ok(Solution { u, m, report })
}

/// Smooth space-time source perturbation with `‖·‖_{L₂(Q_T)} = size`.
fn source_perturbation(grid: &Grid, spectrum: &Spectrum, seed: u64, size: f64) -> Result<Field> {
    let shape = random_cosine_field(grid, spectrum, seed)?;
    let t1 = grid.t_end();
    let mut f = Field::zeros(*grid);
    for n in 0..grid.time_len() {
        let a = 1.0 + 0.5 * (std::f64::consts::PI * grid.time(n) / t1).cos();
        f.set_trace(n, &shape.scale(a));
    }
    let current = norm(&f, NormKind::L2Q, Region::Full)?;
    if current == 0.0 {
        return Err(Error::InvalidParameter("cannot rescale a zero source to a nonzero norm".into()));
    }
    Ok(f.scale(size / current))
}

fn perturbed_solution(base: &StabilityBase, pert: &PerturbationSpec, delta: f64) -> Result<Solution> {
    if delta == 0.0 || pert.targets.is_empty() {
        return solve(&base.problem, &base.u_terminal, &base.m_initial, &base.options);
    }
    let grid = base.problem.grid;
    let mut u_t = base.u_terminal.clone();
    let mut m_0 = base.m_initial.clone();
    let mut g1 = base.problem.g1.clone();
    let mut g2 = base.problem.g2.clone();
    for &t in &pert.targets {
        let seed = pert.field_seed(t);
        match t {
            DataTarget::M0 => {
                m_0 = m_0.add(&random_neumann_field(&grid, &pert.spectrum, seed, Some((NormKind::L2OmegaAt, delta)))?)?;
            }
            DataTarget::UT => {
                u_t = u_t.add(&random_neumann_field(&grid, &pert.spectrum, seed, Some((NormKind::H1OmegaAt, delta)))?)?;
            }
            DataTarget::G1 => g1 = g1.add(&source_perturbation(&grid, &pert.spectrum, seed, delta)?)?,
            DataTarget::G2 => g2 = g2.add(&source_perturbation(&grid, &pert.spectrum, seed, delta)?)?,
        }
    }
    let problem = base.problem.with_sources(g1, g2)?;
    solve(&problem, &u_t, &m_0, &base.options)
}

fn measure(problem: ProblemId, base: &MfgProblem, first: &Solution, second: &Solution, g_diff: (f64, f64)) -> Result<MeasuredDelta> {
    let n = match problem {
        ProblemId::P1 => base.grid.time_len() - 1,
        ProblemId::P2 => 0,
    };
    let du = first.u.trace(n).sub(&second.u.trace(n))?;
    let dm = first.m.trace(n).sub(&second.m.trace(n))?;
    Ok(MeasuredDelta {
        u_data: spatial_norm(&du, NormKind::H1OmegaAt)?,
        m_data: spatial_norm(&dm, NormKind::L2OmegaAt)?,
        g1: g_diff.0,
        g2: g_diff.1,
    })
}

fn source_sizes(pert: &PerturbationSpec, delta: f64) -> (f64, f64) {
    let has = |t| pert.targets.contains(&t) && delta > 0.0;
    (
        if has(DataTarget::G1) { delta } else { 0.0 },
        if has(DataTarget::G2) { delta } else { 0.0 },
    )
}

/// Solves the base and the perturbed configuration and measures their data distance.
pub fn generate_pair(problem: ProblemId, base: &StabilityBase, pert: &PerturbationSpec, delta: f64) -> Result<Pair> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidParameter(format!("delta must be non-negative, got {delta}")));
    }
    let first = solve(&base.problem, &base.u_terminal, &base.m_initial, &base.options)?;
    pair_with(problem, base, pert, delta, first)
}

fn pair_with(problem: ProblemId, base: &StabilityBase, pert: &PerturbationSpec, delta: f64, first: Solution) -> Result<Pair> {
    let second = perturbed_solution(base, pert, delta)?;
    let measured = measure(problem, &base.problem, &first, &second, measured_sources(base, pert, delta)?)?;
    let admissible = first.report.admissibility.admissible() && second.report.admissibility.admissible();
    Ok(Pair { first, second, measured, admissible })
}

/// `L₂(Q_T)` norms of the source differences, recomputed from the fields.
fn measured_sources(base: &StabilityBase, pert: &PerturbationSpec, delta: f64) -> Result<(f64, f64)> {
    let grid = base.problem.grid;
    let (s1, s2) = source_sizes(pert, delta);
    let size = |t: DataTarget, s: f64| -> Result<f64> {
        if s == 0.0 {
            return Ok(0.0);
        }
        norm(&source_perturbation(&grid, &pert.spectrum, pert.field_seed(t), s)?, NormKind::L2Q, Region::Full)
    };
    Ok((size(DataTarget::G1, s1)?, size(DataTarget::G2, s2)?))
}

/// Restricted error norms of one pair (`v = u₁ − u₂`, `p = m₁ − m₂`).
fn lhs_norms(problem: ProblemId, v: &Field, p: &Field, region: Region) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    if problem == ProblemId::P1 {
        out.insert("v_t_l2".to_string(), norm(&v.d_t(), NormKind::L2Q, region)?);
        out.insert("laplacian_v_l2".to_string(), norm(&v.laplacian(), NormKind::L2Q, region)?);
    }
    out.insert("v_h10".to_string(), norm(v, NormKind::H10Q, region)?);
    out.insert("p_h10".to_string(), norm(p, NormKind::H10Q, region)?);
    Ok(out)
}

fn amplification(problem: ProblemId, v: &Field, p: &Field) -> Result<f64> {
    Ok(match problem {
        ProblemId::P1 => 1.0 + norm(p, NormKind::H2Q, Region::Full)?,
        ProblemId::P2 => 1.0 + norm(v, NormKind::H2Q, Region::Full)? + norm(p, NormKind::H1Q, Region::Full)?,
    })
}

/// Theoretical exponent and the `λ(δ₀)` bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryFloor {
    pub exponent: f64,
    pub lambda_of_delta0: f64,
    /// `λ₀` for P2; no explicit value exists for P1.
    pub lambda_threshold: Option<f64>,
    pub lambda_of_delta0_admissible: Option<bool>,
}

pub fn theory_floor(problem: ProblemId, horizon: f64, epsilon: f64, k_or_c: f64, delta0: f64) -> Result<TheoryFloor> {
    match problem {
        ProblemId::P1 => {
            let ps = parameter_formulas(horizon, epsilon, k_or_c, None)?;
            Ok(TheoryFloor {
                exponent: ps.rho,
                lambda_of_delta0: lambda_of_delta_p1(delta0, horizon, k_or_c)?,
                lambda_threshold: None,
                lambda_of_delta0_admissible: None,
            })
        }
        ProblemId::P2 => {
            // k only enters ρ; any admissible value works here
            let ps = parameter_formulas(horizon, epsilon, 3.0, Some(k_or_c))?;
            let l = lambda_of_delta_p2(delta0, horizon, k_or_c)?;
            let l0 = lambda0(horizon, k_or_c);
            Ok(TheoryFloor {
                exponent: ps.eta,
                lambda_of_delta0: l,
                lambda_threshold: Some(l0),
                lambda_of_delta0_admissible: Some(l >= l0),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    pub problem_id: ProblemId,
    pub grid: GridSpec,
    pub epsilon: f64,
    pub epsilon_snapped: f64,
    pub k_or_c: f64,
    pub delta0: f64,
    pub delta_levels: Vec<f64>,
    pub measured_delta: Vec<f64>,
    pub measured_components: Vec<MeasuredDelta>,
    /// Each restricted norm across the levels.
    pub lhs_norms: BTreeMap<String, Vec<f64>>,
    /// Sum of the restricted norms per level.
    pub lhs: Vec<f64>,
    pub amplification: Vec<f64>,
    pub admissible: Vec<bool>,
    pub slope: Option<f64>,
    pub slope_fit_residual: Option<f64>,
    pub rho_or_eta_theory: f64,
    pub theory: TheoryFloor,
    #[serde(rename = "C_fit")]
    pub c_fit: f64,
    /// Restricted norms for the unperturbed control pair.
    pub zero_control_lhs: f64,
    pub degenerate: bool,
    pub floor_holds: bool,
    pub pass: bool,
}

/// One flat CSV row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityRow {
    pub level: usize,
    pub delta_target: f64,
    pub measured_delta: f64,
    pub norm: String,
    pub value: f64,
    pub amplification: f64,
}

impl StabilityReport {
    pub fn rows(&self) -> Vec<StabilityRow> {
        let mut rows = Vec::new();
        for (i, &d) in self.delta_levels.iter().enumerate() {
            let mut push = |name: &str, value: f64| {
                rows.push(StabilityRow {
                    level: i,
                    delta_target: d,
                    measured_delta: self.measured_delta[i],
                    norm: name.to_string(),
                    value,
                    amplification: self.amplification[i],
                })
            };
            for (name, values) in &self.lhs_norms {
                push(name, values[i]);
            }
            push("lhs_total", self.lhs[i]);
        }
        rows
    }
}

/// Least-squares slope of `y` against `x` and the RMS residual.
fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    (slope, (rss / n).sqrt())
}

const SLOPE_TOLERANCE: f64 = 0.02;

/// Runs the δ ladder and checks the Hölder floor.
pub fn holder_experiment(
    problem: ProblemId,
    base: &StabilityBase,
    pert: &PerturbationSpec,
    epsilon: f64,
    k_or_c: f64,
    delta0: f64,
) -> Result<StabilityReport> {
    let grid = base.problem.grid;
    let horizon = grid.t_end();
    if !(epsilon > 0.0 && epsilon < horizon) {
        return Err(Error::InvalidParameter(format!("epsilon must lie in (0, {horizon}), got {epsilon}")));
    }
    if pert.delta_levels.len() < 4 {
        return Err(Error::InvalidParameter(format!(
            "the slope fit needs at least 4 delta levels, got {}",
            pert.delta_levels.len()
        )));
    }
    pert.validate(delta0)?;
    let theory = theory_floor(problem, horizon, epsilon, k_or_c, delta0)?;
    let region = match problem {
        ProblemId::P1 => Region::Slab { t_lo: epsilon, t_hi: horizon },
        ProblemId::P2 => Region::Slab { t_lo: 0.0, t_hi: horizon - epsilon },
    };
    let (lo, hi) = grid.snapped_slab(
        if problem == ProblemId::P1 { epsilon } else { 0.0 },
        if problem == ProblemId::P1 { horizon } else { horizon - epsilon },
    )?;
    let epsilon_snapped = if problem == ProblemId::P1 { lo } else { horizon - hi };

    let first = solve(&base.problem, &base.u_terminal, &base.m_initial, &base.options)?;
    let evaluate = |delta: f64| -> Result<(MeasuredDelta, BTreeMap<String, f64>, f64, bool)> {
        let pair = pair_with(problem, base, pert, delta, first.clone())?;
        let v = pair.first.u.sub(&pair.second.u)?;
        let p = pair.first.m.sub(&pair.second.m)?;
        Ok((pair.measured, lhs_norms(problem, &v, &p, region)?, amplification(problem, &v, &p)?, pair.admissible))
    };
    let control = evaluate(0.0)?;
    let zero_control_lhs: f64 = control.1.values().sum();

    let results: Vec<Result<_>> = pert.delta_levels.par_iter().map(|&d| evaluate(d)).collect();
    let mut levels = Vec::new();
    for (d, r) in pert.delta_levels.iter().zip(results) {
        match r {
            Ok(v) => levels.push((*d, v)),
            Err(e) if e.is_numerical_abort() || matches!(e, Error::NotConverged(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if levels.len() < 4 {
        return Err(Error::Experiment(format!("only {} delta levels converged, need 4", levels.len())));
    }

    let mut lhs_map: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let (mut measured, mut comps, mut lhs, mut amp, mut adm, mut targets) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (d, (md, norms, a, ok)) in &levels {
        targets.push(*d);
        measured.push(md.max());
        comps.push(*md);
        lhs.push(norms.values().sum::<f64>());
        for (k, v) in norms {
            lhs_map.entry(k.clone()).or_default().push(*v);
        }
        amp.push(*a);
        adm.push(*ok);
    }

    let rho = theory.exponent;
    let degenerate = lhs.iter().all(|&l| l == 0.0);
    let (slope, resid, c_fit, floor_holds) = if degenerate {
        (None, None, 0.0, true)
    } else {
        let usable: Vec<usize> = (0..lhs.len()).filter(|&i| lhs[i] > 0.0 && measured[i] > 0.0).collect();
        let (slope, resid) = if usable.len() >= 2 {
            let x: Vec<f64> = usable.iter().map(|&i| measured[i].ln()).collect();
            let y: Vec<f64> = usable.iter().map(|&i| (lhs[i] / amp[i]).ln()).collect();
            let (s, r) = fit_line(&x, &y);
            (Some(s), Some(r))
        } else {
            (None, None)
        };
        let c_fit = lhs[0] / (amp[0] * measured[0].powf(rho));
        let holds = (0..lhs.len()).all(|i| lhs[i] <= c_fit * amp[i] * measured[i].powf(rho) * (1.0 + 1e-12));
        (slope, resid, c_fit, holds)
    };
    let slope_ok = degenerate || slope.is_some_and(|s| s >= rho - SLOPE_TOLERANCE);
    let pass = floor_holds && slope_ok && zero_control_lhs == 0.0 && c_fit.is_finite();

    Ok(StabilityReport {
        problem_id: problem,
        grid: grid.spec(),
        epsilon,
        epsilon_snapped,
        k_or_c,
        delta0,
        delta_levels: targets,
        measured_delta: measured,
        measured_components: comps,
        lhs_norms: lhs_map,
        lhs,
        amplification: amp,
        admissible: adm,
        slope,
        slope_fit_residual: resid,
        rho_or_eta_theory: rho,
        theory,
        c_fit,
        zero_control_lhs,
        degenerate,
        floor_holds,
        pass,
    })
}
