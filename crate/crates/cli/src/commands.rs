//! The four workflows and their artifacts.

use std::path::Path;

use serde::Serialize;

use mfglab::carleman::{
    fit_and_verify, lemma31_check, EstimateId, EstimateParams, FitReport, TestFamily,
    Weight1Params, Weight2Params, WeightChoice,
};
use mfglab::forward_solver::{solve_conventional, InitialGuess, PicardOptions, SolveReport};
use mfglab::grid::{norm, Grid, GridSpec, NormKind, Region};
use mfglab::mfg_system::AdmissibleSetCheck;
use mfglab::reconstruct::{reconstruct_and_score, NoiseSpec, ReconstructionConfig};
use mfglab::scenario::ScenarioSpec;
use mfglab::spectral::random_cosine_field;
use mfglab::stability_lab::{holder_experiment, PerturbationSpec, ProblemId, StabilityBase};
use mfglab::SpatialField;

use crate::config::{Command, ConfigError, RunConfig};
use crate::output::{Artifacts, Cell};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Core(#[from] mfglab::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// 2 for bad input, 3 for numerical or I/O aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Core(e) if e.is_numerical_abort() || matches!(e, mfglab::Error::Experiment(_)) => 3,
            RunError::Core(_) => 2,
            RunError::Io(_) => 3,
        }
    }
}

/// Runs the configured command, writes artifacts into `out` and returns the pass flag.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<bool, RunError> {
    let mut art = Artifacts::new(out)?;
    art.json("config.json", cfg)?;
    let scenario = ScenarioSpec { grid: cfg.grid.clone(), problem: cfg.problem.clone() };
    let pass = match cfg.command {
        Command::Solve => solve(cfg, &scenario, &mut art)?,
        Command::Verify => verify(cfg, &mut art)?,
        Command::Stability => stability(cfg, &scenario, &mut art)?,
        Command::Reconstruct => reconstruct(cfg, &scenario, &mut art)?,
    };
    art.finish(cfg, pass)?;
    Ok(pass)
}

fn picard(cfg: &RunConfig) -> PicardOptions {
    let s = &cfg.solver;
    PicardOptions {
        max_outer_iters: s.max_outer_iters,
        theta: s.theta,
        tol_res: s.tol_res,
        linear_tol: s.linear_tol,
        initial_guess: InitialGuess::Zero,
    }
}

#[derive(Serialize)]
struct SolveSummary {
    grid: GridSpec,
    converged: bool,
    iterations: usize,
    final_residual: f64,
    /// Relative `L₂(Q_T)` errors against the closed-form solution.
    error_u_l2_rel: f64,
    error_m_l2_rel: f64,
    admissibility: AdmissibleSetCheck,
    residual_history: Vec<(f64, f64)>,
    pass: bool,
}

fn solve(cfg: &RunConfig, scenario: &ScenarioSpec, art: &mut Artifacts) -> Result<bool, RunError> {
    let mp = scenario.build()?;
    let (u, m, rep): (_, _, SolveReport) =
        solve_conventional(&mp.problem, &mp.u_terminal(), &mp.m_initial(), &picard(cfg))?;
    let rel = |a: &mfglab::Field, b: &mfglab::Field| -> Result<f64, mfglab::Error> {
        Ok(norm(&a.sub(b)?, NormKind::L2Q, Region::Full)? / norm(b, NormKind::L2Q, Region::Full)?.max(f64::MIN_POSITIVE))
    };
    let summary = SolveSummary {
        grid: cfg.grid.clone(),
        converged: rep.converged,
        iterations: rep.iterations,
        final_residual: rep.final_residual(),
        error_u_l2_rel: rel(&u, &mp.u)?,
        error_m_l2_rel: rel(&m, &mp.m)?,
        admissibility: rep.admissibility.clone(),
        residual_history: rep.residual_history.clone(),
        pass: rep.converged,
    };
    art.json("report.json", &summary)?;
    let rows = rep
        .residual_history
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| vec![Cell::from(i + 1), a.into(), b.into()])
        .collect();
    art.csv("residuals.csv", &["iter", "residual_u", "residual_m"], rows)?;
    let grid = *u.grid();
    let dim = grid.dim();
    let mut header = vec!["n", "t"];
    header.extend(["x0", "x1"].iter().take(dim));
    header.extend(["u", "m"]);
    let mut rows = Vec::with_capacity(grid.len());
    for n in 0..grid.time_len() {
        for s in 0..grid.spatial_len() {
            let x = grid.spatial_coords(s);
            let mut row = vec![Cell::from(n), grid.time(n).into()];
            row.extend(x.iter().take(dim).map(|&v| Cell::from(v)));
            row.extend([Cell::from(u.at(s, n)), Cell::from(m.at(s, n))]);
            rows.push(row);
        }
    }
    art.csv("solution.csv", &header, rows)?;
    Ok(summary.pass)
}

#[derive(Serialize)]
struct FitSummary {
    id: EstimateId,
    weight: WeightChoice,
    lambdas: Vec<f64>,
    #[serde(rename = "C_fit")]
    c_fit: f64,
    slack: f64,
    verified: bool,
    degenerate: bool,
    train_informative: usize,
    holdout_informative: usize,
    worst_holdout_margin: f64,
    lambda_monotone: bool,
    homogeneity_defect: f64,
    pass: bool,
}

#[derive(Serialize)]
struct LemmaSummary {
    fields: usize,
    max_relative_gap: f64,
    tolerance: f64,
    cosine_lhs: f64,
    cosine_rhs: f64,
    cosine_expected: f64,
    cosine_relative_error: f64,
    pass: bool,
}

#[derive(Serialize)]
struct VerifySummary {
    grid: GridSpec,
    estimates: Vec<FitSummary>,
    lemma: Option<LemmaSummary>,
    pass: bool,
}

/// Homogeneity must hold to rounding.
const HOMOGENEITY_TOL: f64 = 1e-12;

fn verify(cfg: &RunConfig, art: &mut Artifacts) -> Result<bool, RunError> {
    let v = cfg.verify.as_ref().expect("validated");
    let grid = cfg.grid.build()?;
    let c = v.c.expect("resolved");
    let family = TestFamily {
        count: v.family.count,
        max_modes: v.family.max_modes,
        max_wavenumber: v.family.max_wavenumber,
        seed: cfg.seed,
        amplitude: v.family.amplitude,
        trace_mode: v.family.trace_mode,
    };
    let mut fits = Vec::new();
    let mut margin_rows = Vec::new();
    for &id in v.estimates.iter().filter(|e| **e != EstimateId::L31) {
        let weight = if id.uses_weight2() {
            WeightChoice::Power(Weight2Params { c, lambda: v.lambdas[0], horizon: grid.t_end() })
        } else {
            WeightChoice::Polynomial(Weight1Params { b: v.b, lambda: v.lambdas[0], k: v.k })
        };
        let params = EstimateParams { beta: cfg.problem.beta, weight, k0: v.k0, allow_below_threshold: v.allow_below_threshold };
        let rep: FitReport = fit_and_verify(id, &grid, &family, &v.lambdas, &params)?;
        margin_rows.extend(rep.margin_rows());
        fits.push(FitSummary {
            id,
            weight,
            lambdas: v.lambdas.clone(),
            c_fit: rep.c_fit,
            slack: rep.slack,
            verified: rep.verified,
            degenerate: rep.degenerate,
            train_informative: rep.train_informative,
            holdout_informative: rep.holdout_informative,
            worst_holdout_margin: rep.worst_holdout_margin,
            lambda_monotone: rep.lambda_monotone,
            homogeneity_defect: rep.homogeneity_defect,
            pass: rep.verified && rep.lambda_monotone && rep.homogeneity_defect <= HOMOGENEITY_TOL,
        });
    }
    if !fits.is_empty() {
        let rows = margin_rows
            .into_iter()
            .map(|r| {
                vec![
                    Cell::from(r.estimate_id),
                    r.sample_seed.into(),
                    r.lambda.into(),
                    r.k_or_c.into(),
                    r.term_name.into(),
                    r.value_normalized.into(),
                    r.log_scale.into(),
                    r.margin.into(),
                ]
            })
            .collect();
        art.csv(
            "margins.csv",
            &["estimate_id", "sample_seed", "lambda", "k_or_c", "term_name", "value_normalized", "log_scale", "margin"],
            rows,
        )?;
    }
    let lemma = if v.estimates.contains(&EstimateId::L31) {
        let (summary, rows) = lemma_suite(&grid, cfg.seed, v)?;
        art.csv("lemma_gaps.csv", &["case", "seed", "lhs", "rhs", "relative_gap"], rows)?;
        Some(summary)
    } else {
        None
    };
    let pass = fits.iter().all(|f| f.pass) && lemma.as_ref().is_none_or(|l| l.pass);
    art.json("report.json", &VerifySummary { grid: cfg.grid.clone(), estimates: fits, lemma, pass })?;
    Ok(pass)
}

fn lemma_suite(grid: &Grid, seed: u64, v: &crate::config::VerifyBlock) -> Result<(LemmaSummary, Vec<Vec<Cell>>), RunError> {
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for i in 0..v.lemma.fields {
        let s = seed.wrapping_add(i as u64);
        let u = random_cosine_field(grid, &v.lemma.spectrum, s)?;
        let chk = lemma31_check(&u)?;
        worst = worst.max(chk.relative_gap);
        rows.push(vec![Cell::from("random"), s.into(), chk.lhs.into(), chk.rhs.into(), chk.relative_gap.into()]);
    }
    // product of cos(π(x_a − lo_a)/L_a): ∫(Δu)² = (Σ(π/L_a)²)² Π(L_a/2)
    let spec = grid.spec();
    let cosine = SpatialField::from_fn(*grid, |x| {
        spec.extents.iter().zip(x).map(|(&(lo, hi), &xa)| (std::f64::consts::PI * (xa - lo) / (hi - lo)).cos()).product()
    });
    let chk = lemma31_check(&cosine)?;
    let k2: f64 = spec.extents.iter().map(|&(lo, hi)| (std::f64::consts::PI / (hi - lo)).powi(2)).sum();
    let expected = k2 * k2 * spec.extents.iter().map(|&(lo, hi)| 0.5 * (hi - lo)).product::<f64>();
    let cosine_err = (chk.lhs - expected).abs().max((chk.rhs - expected).abs()) / expected;
    rows.push(vec![Cell::from("cosine"), 0u64.into(), chk.lhs.into(), chk.rhs.into(), chk.relative_gap.into()]);
    let summary = LemmaSummary {
        fields: v.lemma.fields,
        max_relative_gap: worst,
        tolerance: v.lemma.tolerance,
        cosine_lhs: chk.lhs,
        cosine_rhs: chk.rhs,
        cosine_expected: expected,
        cosine_relative_error: cosine_err,
        pass: worst < v.lemma.tolerance && cosine_err < COSINE_TOL,
    };
    Ok((summary, rows))
}

/// Agreement of the single-mode case with its closed form.
const COSINE_TOL: f64 = 1e-4;

fn stability(cfg: &RunConfig, scenario: &ScenarioSpec, art: &mut Artifacts) -> Result<bool, RunError> {
    let st = cfg.stability.as_ref().expect("validated");
    let mp = scenario.build()?;
    let base = StabilityBase {
        u_terminal: mp.u_terminal(),
        m_initial: mp.m_initial(),
        problem: mp.problem,
        options: picard(cfg),
    };
    let pert = PerturbationSpec {
        seed: cfg.seed,
        spectrum: st.spectrum,
        delta_levels: st.delta_levels.clone(),
        targets: st.targets.clone(),
    };
    let k_or_c = match st.problem_id {
        ProblemId::P1 => st.k,
        ProblemId::P2 => st.c.expect("resolved"),
    };
    let rep = holder_experiment(st.problem_id, &base, &pert, st.epsilon, k_or_c, st.delta0)?;
    art.json("report.json", &rep)?;
    let rows = rep
        .rows()
        .into_iter()
        .map(|r| {
            vec![
                Cell::from(r.level),
                r.delta_target.into(),
                r.measured_delta.into(),
                r.norm.into(),
                r.value.into(),
                r.amplification.into(),
            ]
        })
        .collect();
    art.csv("stability.csv", &["level", "delta_target", "measured_delta", "norm", "value", "amplification"], rows)?;
    Ok(rep.pass)
}

fn reconstruct(cfg: &RunConfig, scenario: &ScenarioSpec, art: &mut Artifacts) -> Result<bool, RunError> {
    let r = cfg.reconstruct.as_ref().expect("validated");
    let mp = scenario.build()?;
    let problem = if r.consistent_sources { mp.problem.with_discrete_sources(&mp.u, &mp.m)? } else { mp.problem.clone() };
    let lambda = r.lambda.expect("resolved");
    let weight = match r.problem_id {
        ProblemId::P1 => WeightChoice::Polynomial(Weight1Params { b: r.b, lambda, k: r.k }),
        ProblemId::P2 => WeightChoice::Power(Weight2Params { c: r.c.expect("resolved"), lambda, horizon: cfg.grid.horizon }),
    };
    let rc = ReconstructionConfig {
        problem_id: r.problem_id,
        weight,
        alpha: r.alpha,
        outer_iters: r.outer_iters,
        cg_max_iters: r.cg_max_iters,
        cg_budget: r.cg_budget,
        cg_tol: r.cg_tol,
        grad_tol: r.grad_tol,
        max_log_range: r.max_log_range,
        noise_alpha_factor: r.noise_alpha_factor,
    };
    let noise = NoiseSpec { seed: cfg.seed, spectrum: r.spectrum, delta_levels: r.delta_levels.clone() };
    let rep = reconstruct_and_score(&problem, &rc, (&mp.u, &mp.m), r.epsilon, &noise, r.error_tolerance)?;
    art.json("report.json", &rep)?;
    let rows = rep
        .iterations
        .iter()
        .map(|it| {
            let step = serde_json::to_value(it.step_type).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            vec![Cell::from(it.iter), it.j.into(), it.grad_norm.into(), step.into()]
        })
        .collect();
    art.csv("iterations.csv", &["iter", "J", "grad_norm", "step_type"], rows)?;
    let mut rows = vec![error_row(0.0, r.alpha, &rep.noiseless)];
    for ((d, a), e) in rep.delta_levels.iter().zip(&rep.noisy_alpha).zip(&rep.noisy) {
        rows.push(error_row(*d, *a, e));
    }
    art.csv("errors.csv", &["delta", "alpha", "u_l2_rel", "m_l2_rel", "u_theorem_rel", "m_theorem_rel"], rows)?;
    Ok(rep.pass)
}

fn error_row(delta: f64, alpha: f64, e: &mfglab::reconstruct::ErrorSet) -> Vec<Cell> {
    vec![delta.into(), alpha.into(), e.u_l2_rel.into(), e.m_l2_rel.into(), e.u_theorem_rel.into(), e.m_theorem_rel.into()]
}
