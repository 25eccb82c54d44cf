use serde::{Deserialize, Serialize};

use super::{Weight1Params, Weight2Params};
use crate::error::{Error, Result};
use crate::grid::{DiffOps, Field, Grid};
use crate::spectral::spectral_hessian;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimateId {
    #[serde(rename = "T3.1")]
    T31,
    #[serde(rename = "T3.2")]
    T32,
    #[serde(rename = "T3.3")]
    T33,
    #[serde(rename = "T3.4")]
    T34,
    #[serde(rename = "L3.1")]
    L31,
}

impl EstimateId {
    pub fn label(&self) -> &'static str {
        match self {
            EstimateId::T31 => "T3.1",
            EstimateId::T32 => "T3.2",
            EstimateId::T33 => "T3.3",
            EstimateId::T34 => "T3.4",
            EstimateId::L31 => "L3.1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [EstimateId::T31, EstimateId::T32, EstimateId::T33, EstimateId::T34, EstimateId::L31]
            .into_iter()
            .find(|id| id.label() == s)
    }

    /// True for the estimates written with the second weight.
    pub fn uses_weight2(&self) -> bool {
        matches!(self, EstimateId::T33 | EstimateId::T34)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum WeightChoice {
    Polynomial(Weight1Params),
    Power(Weight2Params),
}

impl WeightChoice {
    pub fn lambda(&self) -> f64 {
        match self {
            WeightChoice::Polynomial(p) => p.lambda,
            WeightChoice::Power(p) => p.lambda,
        }
    }

    /// `k` for the first weight, `c` for the second.
    pub fn k_or_c(&self) -> f64 {
        match self {
            WeightChoice::Polynomial(p) => p.k,
            WeightChoice::Power(p) => p.c,
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        match *self {
            WeightChoice::Polynomial(p) => WeightChoice::Polynomial(Weight1Params { lambda, ..p }),
            WeightChoice::Power(p) => WeightChoice::Power(Weight2Params { lambda, ..p }),
        }
    }

    pub fn log_weight(&self, t: f64) -> f64 {
        match self {
            WeightChoice::Polynomial(p) => p.log_weight(t),
            WeightChoice::Power(p) => p.log_weight(t),
        }
    }

    /// `log φ(t) − log φ(t_ref)` without cancellation between large logs.
    fn log_weight_offset(&self, t: f64, t_ref: f64) -> f64 {
        match self {
            WeightChoice::Polynomial(p) => {
                let base = t_ref + p.b;
                p.lambda * base.powf(p.k) * (p.k * ((t - t_ref) / base).ln_1p()).exp_m1()
            }
            WeightChoice::Power(p) => {
                let base = p.horizon - t_ref + p.c;
                base.powf(p.lambda) * (p.lambda * (-(t - t_ref) / base).ln_1p()).exp_m1()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateParams {
    pub beta: f64,
    pub weight: WeightChoice,
    /// Working threshold for `k` in the forward-parabolic estimate.
    pub k0: f64,
    /// Admit `λ < λ₀` for the second weight (`λ > 2` is still required).
    pub allow_below_threshold: bool,
}

/// Where a term sits in `lhs + free ≥ C · (positive − negative)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Lhs,
    /// Subtracted on the right without the constant.
    Free,
    Positive,
    /// Subtracted on the right together with the constant.
    Negative,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Term {
    pub name: &'static str,
    pub side: Side,
    /// Value divided by `exp(log_scale)`.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TermBreakdown {
    pub id: EstimateId,
    pub params: EstimateParams,
    /// `log max_{Q_T} φ²` (zero for the unweighted identity).
    pub log_scale: f64,
    pub terms: Vec<Term>,
}

impl TermBreakdown {
    pub fn total(&self, side: Side) -> f64 {
        self.terms.iter().filter(|t| t.side == side).map(|t| t.value).sum()
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    /// `lhs + free − C (positive − negative)`; nonnegative iff the estimate holds with `C`.
    pub fn margin(&self, c: f64) -> f64 {
        self.total(Side::Lhs) + self.total(Side::Free) - c * (self.total(Side::Positive) - self.total(Side::Negative))
    }

    /// Largest `C` for which the estimate holds, `None` when every `C ≥ 0` works.
    pub fn admissible_constant(&self) -> Option<f64> {
        let dominated = self.total(Side::Positive) - self.total(Side::Negative);
        (dominated > 0.0).then(|| (self.total(Side::Lhs) + self.total(Side::Free)) / dominated)
    }
}

fn check_params(id: EstimateId, grid: &Grid, p: &EstimateParams) -> Result<()> {
    if !(p.beta > 0.0) {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {}", p.beta)));
    }
    match (id, &p.weight) {
        (EstimateId::L31, _) => Ok(()),
        (EstimateId::T31 | EstimateId::T32, WeightChoice::Polynomial(w)) => {
            w.validate()?;
            if id == EstimateId::T32 && w.k < p.k0 && !p.allow_below_threshold {
                return Err(Error::InvalidParameter(format!("k = {} lies below k0 = {}", w.k, p.k0)));
            }
            Ok(())
        }
        (EstimateId::T33 | EstimateId::T34, WeightChoice::Power(w)) => {
            w.validate(p.allow_below_threshold)?;
            if (w.horizon - grid.t_end()).abs() > 1e-12 * w.horizon.max(1.0) {
                return Err(Error::InvalidParameter(format!(
                    "weight horizon {} differs from the grid end time {}",
                    w.horizon,
                    grid.t_end()
                )));
            }
            Ok(())
        }
        _ => Err(Error::InvalidParameter(format!("{} needs the other weight family", id.label()))),
    }
}

/// Quadrature with normalized weights `φ²(t)/max φ²`.
///
/// In time the exact weight is integrated against the piecewise-linear
/// interpolant of the nodal integrand, which stays accurate when `φ²`
/// varies by many orders of magnitude across one step.
struct Weighted {
    grid: Grid,
    /// `∫ φ²(t)/max φ² · hat_n(t) dt` for each time node.
    time_factor: Vec<f64>,
    spatial_w: Vec<f64>,
    log_scale: f64,
}

/// Adaptive Simpson for the two hat-weighted integrals on one cell.
fn simpson_pair(f: &dyn Fn(f64) -> [f64; 2], a: f64, b: f64, fa: [f64; 2], fm: [f64; 2], fb: [f64; 2], depth: u32) -> [f64; 2] {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let h = b - a;
    let mut out = [0.0; 2];
    let mut done = depth >= 60;
    if !done {
        done = (0..2).all(|i| {
            let whole = h / 6.0 * (fa[i] + 4.0 * fm[i] + fb[i]);
            let halves = h / 12.0 * (fa[i] + 4.0 * flm[i] + 2.0 * fm[i] + 4.0 * frm[i] + fb[i]);
            (whole - halves).abs() <= 1e-10 * halves.abs() || halves.abs() < 1e-300
        });
        done &= depth >= 2;
    }
    if done {
        for i in 0..2 {
            out[i] = h / 12.0 * (fa[i] + 4.0 * flm[i] + 2.0 * fm[i] + 4.0 * frm[i] + fb[i]);
        }
        return out;
    }
    let l = simpson_pair(f, a, m, fa, flm, fm, depth + 1);
    let r = simpson_pair(f, m, b, fm, frm, fb, depth + 1);
    [l[0] + r[0], l[1] + r[1]]
}

impl Weighted {
    fn new(grid: &Grid, weight: &WeightChoice) -> Result<Self> {
        let nt = grid.time_len();
        let logs: Vec<f64> = (0..nt).map(|n| 2.0 * weight.log_weight(grid.time(n))).collect();
        if logs.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("log of the Carleman weight".into()));
        }
        // both weights are monotone in t, so the maximum sits at an end node
        let peak = if logs[nt - 1] >= logs[0] { nt - 1 } else { 0 };
        let (log_scale, t_peak) = (logs[peak], grid.time(peak));
        let mut time_factor = vec![0.0; nt];
        for n in 0..nt.saturating_sub(1) {
            let (a, b) = (grid.time(n), grid.time(n + 1));
            let dt = b - a;
            let f = |t: f64| {
                let w = (2.0 * weight.log_weight_offset(t, t_peak)).exp();
                [w * (b - t) / dt, w * (t - a) / dt]
            };
            let parts = simpson_pair(&f, a, b, f(a), f(0.5 * (a + b)), f(b), 0);
            time_factor[n] += parts[0];
            time_factor[n + 1] += parts[1];
        }
        Ok(Self {
            grid: *grid,
            time_factor,
            spatial_w: grid.spatial_weights(),
            log_scale,
        })
    }

    fn integral(&self, f: impl Fn(usize) -> f64) -> f64 {
        let ns = self.grid.spatial_len();
        let mut total = 0.0;
        for (n, tf) in self.time_factor.iter().enumerate() {
            if *tf == 0.0 {
                continue;
            }
            let slab: f64 = (0..ns).map(|s| self.spatial_w[s] * f(n * ns + s)).sum();
            total += tf * slab;
        }
        total
    }

    /// `exp(log_prefactor − log_scale) ∫_Ω f(·, t_n) dx`.
    fn trace(&self, n: usize, log_prefactor: f64, f: impl Fn(usize) -> f64) -> f64 {
        let ns = self.grid.spatial_len();
        let slab: f64 = (0..ns).map(|s| self.spatial_w[s] * f(n * ns + s)).sum();
        (log_prefactor - self.log_scale).exp() * slab
    }
}

fn grad_sq(ops: &DiffOps, k: usize) -> f64 {
    ops.gradient.iter().map(|g| g.values()[k].powi(2)).sum()
}

/// Evaluates every term of one estimate for the test field `u`.
///
/// `v` and `g` are required by the quasi-estimate `T3.4` only.
pub fn estimate_terms(
    id: EstimateId,
    u: &Field,
    v: Option<&Field>,
    g: Option<&Field>,
    params: &EstimateParams,
) -> Result<TermBreakdown> {
    let grid = *u.grid();
    check_params(id, &grid, params)?;
    if id == EstimateId::L31 {
        return lemma_terms(u, params);
    }
    let w = Weighted::new(&grid, &params.weight)?;
    let ops = DiffOps::new(u);
    let (ut, lap) = (ops.d_t.values(), ops.laplacian.values());
    let uv = u.values();
    let beta = params.beta;
    let last = grid.time_len() - 1;
    let t_end = grid.t_end();
    let lambda = params.weight.lambda();
    let mut terms = Vec::new();
    let mut push = |name, side, value: f64| terms.push(Term { name, side, value });
    match (id, params.weight) {
        (EstimateId::T31, WeightChoice::Polynomial(p)) => {
            let k = p.k;
            let tb = t_end + p.b;
            let log_t = 2.0 * p.log_weight(t_end);
            push("operator", Side::Lhs, w.integral(|i| (ut[i] + beta * lap[i]).powi(2)));
            push("trace_gradient_T", Side::Free, w.trace(last, log_t, |i| grad_sq(&ops, i)));
            push(
                "trace_value_T",
                Side::Free,
                lambda * k * tb.powf(k) * w.trace(last, log_t, |i| uv[i] * uv[i]),
            );
            push("derivatives", Side::Positive, w.integral(|i| ut[i] * ut[i] + lap[i] * lap[i]));
            push("gradient", Side::Positive, lambda * k * w.integral(|i| grad_sq(&ops, i)));
            push("zeroth", Side::Positive, (lambda * k).powi(2) * w.integral(|i| uv[i] * uv[i]));
        }
        (EstimateId::T32, WeightChoice::Polynomial(p)) => {
            let k = p.k;
            let tb = t_end + p.b;
            let log_t = 2.0 * p.log_weight(t_end);
            let log_0 = 2.0 * p.log_weight(grid.t_start());
            push("operator", Side::Lhs, w.integral(|i| (ut[i] - beta * lap[i]).powi(2)));
            push("gradient", Side::Positive, k.sqrt() * beta * w.integral(|i| grad_sq(&ops, i)));
            push("zeroth", Side::Positive, lambda * k * k * w.integral(|i| uv[i] * uv[i]));
            push(
                "trace_value_T",
                Side::Negative,
                lambda * k * tb.powf(k - 1.0) * w.trace(last, log_t, |i| uv[i] * uv[i]),
            );
            push("trace_gradient_0", Side::Negative, w.trace(0, log_0, |i| grad_sq(&ops, i)));
            push("trace_value_0", Side::Negative, k.sqrt() * w.trace(0, log_0, |i| uv[i] * uv[i]));
        }
        (EstimateId::T33, WeightChoice::Power(p)) => {
            let c = p.c;
            let log_t = 2.0 * p.log_weight(t_end);
            let log_0 = 2.0 * p.log_weight(grid.t_start());
            push("operator", Side::Lhs, w.integral(|i| (ut[i] + beta * lap[i]).powi(2)));
            push("gradient", Side::Positive, lambda.sqrt() * w.integral(|i| grad_sq(&ops, i)));
            push(
                "zeroth",
                Side::Positive,
                lambda * lambda * c.powf(lambda - 2.0) * w.integral(|i| uv[i] * uv[i]),
            );
            push("trace_gradient_T", Side::Negative, w.trace(last, log_t, |i| grad_sq(&ops, i)));
            push("trace_value_T", Side::Negative, w.trace(last, log_t, |i| uv[i] * uv[i]));
            push(
                "trace_value_0",
                Side::Negative,
                lambda * (p.horizon + c).powf(lambda - 1.0) * w.trace(0, log_0, |i| uv[i] * uv[i]),
            );
        }
        (EstimateId::T34, WeightChoice::Power(p)) => {
            let (v, g) = match (v, g) {
                (Some(v), Some(g)) => (v, g),
                _ => return Err(Error::InvalidParameter("T3.4 needs the fields v and g".into())),
            };
            u.check_same(v)?;
            u.check_same(g)?;
            let lap_v = v.laplacian();
            let (lv, gv) = (lap_v.values(), g.values());
            let c = p.c;
            let tc = p.horizon + c;
            let log_0 = 2.0 * p.log_weight(grid.t_start());
            push(
                "operator",
                Side::Lhs,
                w.integral(|i| (ut[i] - beta * lap[i] + gv[i] * lv[i]).powi(2)),
            );
            push(
                "trace_value_0",
                Side::Free,
                lambda * tc.powf(lambda - 1.0) * w.trace(0, log_0, |i| uv[i] * uv[i]),
            );
            let grad = w.integral(|i| grad_sq(&ops, i));
            push("gradient", Side::Positive, lambda * c.powf(lambda - 1.0) * grad);
            push(
                "zeroth",
                Side::Positive,
                lambda * lambda * c.powf(2.0 * lambda - 2.0) * w.integral(|i| uv[i] * uv[i]),
            );
            push("gradient_penalty", Side::Negative, lambda * tc.powf(lambda - 1.0) * grad);
        }
        _ => unreachable!("weight family checked above"),
    }
    if let Some(bad) = terms.iter().find(|t| !t.value.is_finite()) {
        return Err(Error::NonFinite(format!("Carleman term {}", bad.name)));
    }
    Ok(TermBreakdown {
        id,
        params: *params,
        log_scale: w.log_scale,
        terms,
    })
}

/// Unweighted space-time integrals of `(Δu)²` and `Σ u_{x_i x_j}²` (spectral).
fn lemma_terms(u: &Field, params: &EstimateParams) -> Result<TermBreakdown> {
    let grid = *u.grid();
    let tw = grid.time_weights(0, grid.time_len() - 1);
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for (n, wt) in tw.iter().enumerate() {
        let hess = spectral_hessian(&u.trace(n));
        let mut lap = vec![0.0; grid.spatial_len()];
        for (i, row) in hess.iter().enumerate() {
            for (l, v) in lap.iter_mut().zip(row[i].values()) {
                *l += v;
            }
            for d in row {
                rhs += wt * d.zip_map(d, |a, b| a * b)?.integrate();
            }
        }
        let lap = crate::grid::SpatialField::new(grid, lap)?;
        lhs += wt * lap.zip_map(&lap, |a, b| a * b)?.integrate();
    }
    Ok(TermBreakdown {
        id: EstimateId::L31,
        params: *params,
        log_scale: 0.0,
        terms: vec![
            Term { name: "laplacian_sq", side: Side::Lhs, value: lhs },
            Term { name: "hessian_sq", side: Side::Positive, value: rhs },
        ],
    })
}
