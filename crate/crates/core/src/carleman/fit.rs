use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::terms::{estimate_terms, EstimateId, EstimateParams, Side, TermBreakdown, WeightChoice};
use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::spectral::{cosine_series, Mode};

/// How the random test functions behave at the ends of the time interval.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    /// Unconstrained traces.
    Free,
    /// Multiplied by `(t − t₀)` and/or `(T − t)` so the traces that an
    /// estimate subtracts on its right side vanish.
    #[default]
    VanishAtData,
}

/// Seeded family of truncated cosine series with cosine time profiles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestFamily {
    pub count: usize,
    pub max_modes: usize,
    pub max_wavenumber: usize,
    pub seed: u64,
    /// Overall scale; zero gives the degenerate family.
    pub amplitude: f64,
    pub trace_mode: TraceMode,
}

impl Default for TestFamily {
    fn default() -> Self {
        Self {
            count: 20,
            max_modes: 8,
            max_wavenumber: 8,
            seed: 0,
            amplitude: 1.0,
            trace_mode: TraceMode::VanishAtData,
        }
    }
}

struct SpaceTimeMode {
    spatial: Mode,
    omega: f64,
    phase: f64,
}

/// `max_modes` distinct wavenumbers (fewer if the band is narrower), each with
/// a Gaussian coefficient and its own time oscillation.
fn random_series(grid: &Grid, fam: &TestFamily, rng: &mut ChaCha8Rng) -> Vec<SpaceTimeMode> {
    let side = fam.max_wavenumber + 1;
    let band = if grid.dim() == 2 { side * side } else { side };
    let picks = rand::seq::index::sample(rng, band, fam.max_modes.min(band)).into_vec();
    picks
        .into_iter()
        .map(|p| {
            let (kx, ky) = (p % side, p / side);
            let z: f64 = rng.sample(StandardNormal);
            SpaceTimeMode {
                spatial: Mode { wavenumbers: [kx, ky], amplitude: fam.amplitude * z },
                omega: rng.random_range(0.0..2.0 * PI),
                phase: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect()
}

fn series_field(grid: &Grid, modes: &[SpaceTimeMode], factor: impl Fn(f64) -> f64) -> Field {
    let shapes: Vec<Vec<f64>> = modes
        .iter()
        .map(|m| cosine_series(grid, std::slice::from_ref(&m.spatial)).values().to_vec())
        .collect();
    let ns = grid.spatial_len();
    let mut values = vec![0.0; grid.len()];
    for n in 0..grid.time_len() {
        let t = grid.time(n);
        let f = factor(t);
        for (m, shape) in modes.iter().zip(&shapes) {
            let a = f * (m.omega * t + m.phase).cos();
            for (v, s) in values[n * ns..(n + 1) * ns].iter_mut().zip(shape) {
                *v += a * s;
            }
        }
    }
    Field::new(*grid, values).expect("finite cosine series")
}

/// Which ends carry traces subtracted together with the constant.
fn data_ends(id: EstimateId) -> (bool, bool) {
    match id {
        EstimateId::T32 | EstimateId::T33 => (true, true),
        _ => (false, false),
    }
}

/// The `i`-th member of the family: `u`, plus `v` and a bounded `g` for the quasi-estimate.
pub(crate) fn family_member(grid: &Grid, fam: &TestFamily, id: EstimateId, i: usize) -> (Field, Option<Field>, Option<Field>) {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(fam, i));
    let (t0, t1) = (grid.t_start(), grid.t_end());
    let (at_start, at_end) = match fam.trace_mode {
        TraceMode::Free => (false, false),
        TraceMode::VanishAtData => data_ends(id),
    };
    let span = t1 - t0;
    let factor = move |t: f64| {
        let mut f = 1.0;
        if at_start {
            f *= (t - t0) / span;
        }
        if at_end {
            f *= (t1 - t) / span;
        }
        f
    };
    let u = series_field(grid, &random_series(grid, fam, &mut rng), factor);
    if id != EstimateId::T34 {
        return (u, None, None);
    }
    let v = series_field(grid, &random_series(grid, fam, &mut rng), |_| 1.0);
    let raw = series_field(grid, &random_series(grid, &TestFamily { amplitude: 1.0, ..*fam }, &mut rng), |_| 1.0);
    let sup = raw.sup_abs();
    let g = if sup > 0.0 { raw.scale(0.5 / sup) } else { raw };
    (u, Some(v), Some(g))
}

/// Independent per-function seeds; `seed + i` would make neighbouring family
/// seeds share members.
fn sample_seed(fam: &TestFamily, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(fam.seed);
    rng.set_stream(i as u64);
    rng.random()
}

/// One `(function, λ)` sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleOutcome {
    pub function_index: usize,
    pub sample_seed: u64,
    pub lambda: f64,
    pub k_or_c: f64,
    pub training: bool,
    pub breakdown: TermBreakdown,
    /// Largest `C` satisfying this sample; `None` when any `C` does.
    pub admissible_constant: Option<f64>,
    /// Margin at the verification constant `C_fit / slack`.
    pub margin: f64,
}

/// One CSV row of the margin table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginRow {
    pub estimate_id: String,
    pub sample_seed: u64,
    pub lambda: f64,
    pub k_or_c: f64,
    pub term_name: String,
    pub value_normalized: f64,
    pub log_scale: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitReport {
    pub id: EstimateId,
    pub c_fit: f64,
    pub slack: f64,
    pub verified: bool,
    /// Every sample is satisfied by every constant (e.g. the zero family).
    pub degenerate: bool,
    pub train_informative: usize,
    pub holdout_informative: usize,
    /// Smallest holdout margin relative to its `lhs + free` side.
    pub worst_holdout_margin: f64,
    /// The zeroth-order positive term grows strictly with `λ` for every function.
    pub lambda_monotone: bool,
    /// Largest relative deviation of `terms(2u) / 4` from `terms(u)` on the first function.
    pub homogeneity_defect: f64,
    pub samples: Vec<SampleOutcome>,
}

impl FitReport {
    pub fn margin_rows(&self) -> Vec<MarginRow> {
        let mut rows = Vec::new();
        for s in &self.samples {
            for t in &s.breakdown.terms {
                rows.push(MarginRow {
                    estimate_id: self.id.label().to_string(),
                    sample_seed: s.sample_seed,
                    lambda: s.lambda,
                    k_or_c: s.k_or_c,
                    term_name: t.name.to_string(),
                    value_normalized: t.value,
                    log_scale: s.breakdown.log_scale,
                    margin: s.margin,
                });
            }
        }
        rows
    }
}

pub const SLACK: f64 = 1.5;

/// Fits the constant on even-indexed functions and checks it on odd ones.
pub fn fit_and_verify(
    id: EstimateId,
    grid: &Grid,
    family: &TestFamily,
    lambdas: &[f64],
    params: &EstimateParams,
) -> Result<FitReport> {
    if family.count == 0 {
        return Err(Error::InvalidParameter("test family is empty".into()));
    }
    if family.count < 2 {
        return Err(Error::InvalidParameter("train/holdout split needs at least two functions".into()));
    }
    if family.max_modes == 0 {
        return Err(Error::InvalidParameter("test functions need at least one mode".into()));
    }
    if lambdas.is_empty() {
        return Err(Error::InvalidParameter("lambda sweep is empty".into()));
    }
    // fail fast on parameters below the validity threshold
    for &l in lambdas {
        let p = EstimateParams { weight: params.weight.with_lambda(l), ..*params };
        estimate_terms(id, &Field::zeros(*grid), Some(&Field::zeros(*grid)), Some(&Field::zeros(*grid)), &p)?;
    }
    let per_function: Vec<Vec<SampleOutcome>> = (0..family.count)
        .into_par_iter()
        .map(|i| {
            let (u, v, g) = family_member(grid, family, id, i);
            lambdas
                .iter()
                .map(|&l| {
                    let p = EstimateParams { weight: params.weight.with_lambda(l), ..*params };
                    let breakdown = estimate_terms(id, &u, v.as_ref(), g.as_ref(), &p)?;
                    Ok(SampleOutcome {
                        function_index: i,
                        sample_seed: sample_seed(family, i),
                        lambda: l,
                        k_or_c: p.weight.k_or_c(),
                        training: i % 2 == 0,
                        admissible_constant: breakdown.admissible_constant(),
                        breakdown,
                        margin: 0.0,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let lambda_monotone = per_function.iter().all(|samples| zeroth_monotone(samples));
    let homogeneity_defect = {
        let (u, v, g) = family_member(grid, family, id, 0);
        let p = EstimateParams { weight: params.weight.with_lambda(lambdas[0]), ..*params };
        let once = estimate_terms(id, &u, v.as_ref(), g.as_ref(), &p)?;
        let v2 = v.as_ref().map(|v| v.scale(2.0));
        let twice = estimate_terms(id, &u.scale(2.0), v2.as_ref(), g.as_ref(), &p)?;
        once.terms
            .iter()
            .zip(&twice.terms)
            .map(|(a, b)| {
                let d = (b.value - 4.0 * a.value).abs();
                if a.value == 0.0 { d } else { d / (4.0 * a.value.abs()) }
            })
            .fold(0.0, f64::max)
    };
    let mut samples: Vec<SampleOutcome> = per_function.into_iter().flatten().collect();
    let informative = |train: bool| {
        samples
            .iter()
            .filter(|s| s.training == train && s.admissible_constant.is_some())
            .count()
    };
    let (train_informative, holdout_informative) = (informative(true), informative(false));
    let c_fit = samples
        .iter()
        .filter(|s| s.training)
        .filter_map(|s| s.admissible_constant)
        .fold(f64::INFINITY, f64::min);
    let degenerate = train_informative == 0;
    let c_fit = if degenerate { 0.0 } else { c_fit.max(0.0) };
    let c_check = c_fit / SLACK;
    let mut worst = f64::INFINITY;
    for s in samples.iter_mut() {
        s.margin = s.breakdown.margin(c_check);
        if !s.training {
            let scale = s.breakdown.total(Side::Lhs) + s.breakdown.total(Side::Free);
            let rel = if scale > 0.0 { s.margin / scale } else { s.margin };
            worst = worst.min(rel);
        }
    }
    let holdout_ok = samples.iter().filter(|s| !s.training).all(|s| s.margin >= 0.0);
    Ok(FitReport {
        id,
        c_fit,
        slack: SLACK,
        verified: !degenerate && holdout_informative > 0 && c_fit > 0.0 && holdout_ok,
        degenerate,
        train_informative,
        holdout_informative,
        worst_holdout_margin: worst,
        lambda_monotone,
        homogeneity_defect,
        samples,
    })
}

/// Compares `log(zeroth) + log_scale` across increasing `λ` for one function.
fn zeroth_monotone(samples: &[SampleOutcome]) -> bool {
    let mut pts: Vec<(f64, f64)> = samples
        .iter()
        .filter_map(|s| {
            let v = s.breakdown.term("zeroth")?;
            Some((s.lambda, v.ln() + s.breakdown.log_scale))
        })
        .collect();
    if pts.iter().any(|(_, l)| !l.is_finite()) {
        // zero function: nothing to compare
        return pts.iter().all(|(_, l)| *l == f64::NEG_INFINITY);
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.windows(2).all(|w| w[0].0 == w[1].0 || w[1].1 > w[0].1)
}

/// Runs the fit for each `k` (first weight only) and returns the smallest verified one.
pub fn smallest_verified_k(
    id: EstimateId,
    grid: &Grid,
    family: &TestFamily,
    lambdas: &[f64],
    params: &EstimateParams,
    ks: &[f64],
) -> Result<(Option<f64>, Vec<FitReport>)> {
    let WeightChoice::Polynomial(base) = params.weight else {
        return Err(Error::InvalidParameter("k sweeps need the polynomial weight".into()));
    };
    let mut sorted = ks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut reports = Vec::new();
    let mut best = None;
    for k in sorted {
        let p = EstimateParams {
            weight: WeightChoice::Polynomial(super::Weight1Params { k, ..base }),
            ..*params
        };
        let r = fit_and_verify(id, grid, family, lambdas, &p)?;
        if r.verified && best.is_none() {
            best = Some(k);
        }
        reports.push(r);
    }
    Ok((best, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::carleman::Weight1Params;

    fn params() -> EstimateParams {
        EstimateParams {
            beta: 0.1,
            weight: WeightChoice::Polynomial(Weight1Params { b: 1.0, lambda: 5.0, k: 3.0 }),
            k0: 4.0,
            allow_below_threshold: false,
        }
    }

    #[test]
    fn zero_family_is_degenerate() {
        let g = Grid::new(&[(0.0, 1.0)], &[17], 1.0, 17).unwrap();
        let fam = TestFamily { count: 4, amplitude: 0.0, ..Default::default() };
        let r = fit_and_verify(EstimateId::T31, &g, &fam, &[5.0, 10.0], &params()).unwrap();
        assert!(r.degenerate && !r.verified);
        assert_eq!(r.c_fit, 0.0);
        assert!(r.samples.iter().all(|s| s.margin == 0.0));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let g = Grid::new(&[(0.0, 1.0)], &[17], 1.0, 17).unwrap();
        let fam = TestFamily { count: 0, ..Default::default() };
        assert!(fit_and_verify(EstimateId::T31, &g, &fam, &[5.0], &params()).is_err());
        assert!(fit_and_verify(EstimateId::T31, &g, &TestFamily::default(), &[], &params()).is_err());
    }

    #[test]
    fn members_are_seeded_and_respect_trace_mode() {
        let g = Grid::new(&[(0.0, 1.0)], &[17], 1.0, 9).unwrap();
        let fam = TestFamily::default();
        let (a, _, _) = family_member(&g, &fam, EstimateId::T33, 3);
        let (b, _, _) = family_member(&g, &fam, EstimateId::T33, 3);
        assert_eq!(a.values(), b.values());
        assert!(a.trace(0).sup_abs() == 0.0 && a.trace(8).sup_abs() == 0.0);
        let (_, v, gg) = family_member(&g, &fam, EstimateId::T34, 0);
        assert!(gg.unwrap().sup_abs() <= 0.5 + 1e-15 && v.is_some());
    }

    #[test]
    fn margin_rows_cover_every_term() {
        let g = Grid::new(&[(0.0, 1.0)], &[17], 1.0, 17).unwrap();
        let fam = TestFamily { count: 4, ..Default::default() };
        let r = fit_and_verify(EstimateId::T31, &g, &fam, &[5.0, 10.0], &params()).unwrap();
        assert_eq!(r.margin_rows().len(), 4 * 2 * 6);
        assert!(r.lambda_monotone);
    }
}
