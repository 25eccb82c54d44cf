//! Carleman-weighted least-squares reconstruction from non-conventional data.
//!
//! The unknowns are `(u, m)` on every node of `Q_T`. The data traces of the
//! selected problem are imposed exactly (time level `N` for P1, level `0`
//! for P2); Neumann conditions are built into the mirror-ghost stencils.
//! The objective
//!
//! `J = ∫ φ² (R_u² + R_m²) + α (‖u‖²_{H²} + ‖m‖²_{H²})`
//!
//! is evaluated and reported divided by `e^S = max φ²`, which keeps it finite
//! for any `λ`; the minimizer is unchanged. It is minimized by Gauss–Newton;
//! each step runs CG on the linearized normal equations, preconditioned by
//! a banded Cholesky factor of the assembled normal matrix (Jacobi if the
//! factorization fails).

use serde::{Deserialize, Serialize};

use crate::carleman::{parameter_formulas, EstimateParams, WeightChoice};
use crate::error::{Error, Result};
use crate::grid::{constituents, norm, Derivative, Field, Grid, GridSpec, NormKind, Region, SpatialField};
use crate::linalg::{pcg_with, BandCholesky};
use crate::mfg_system::{flux_matrix_in_m, flux_matrix_in_u, residual_m, residual_u, MfgProblem};
use crate::sparse::CsrMatrix;
use crate::spectral::Spectrum;
use crate::stability_lab::{random_neumann_field, ProblemId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub problem_id: ProblemId,
    /// Polynomial weight for P1, power weight for P2.
    pub weight: WeightChoice,
    pub alpha: f64,
    pub outer_iters: usize,
    /// Cap on CG iterations within one Gauss–Newton step.
    pub cg_max_iters: usize,
    /// Cap on CG iterations over the whole run.
    pub cg_budget: usize,
    pub cg_tol: f64,
    pub grad_tol: f64,
    /// Largest admitted `log(max φ² / min φ²)`; `λ` is clipped to respect it.
    pub max_log_range: f64,
    /// Noisy runs use `α(δ) = max(α, κ δ² e^S)`, i.e. `κ δ²` against the peak weight.
    pub noise_alpha_factor: f64,
}

impl ReconstructionConfig {
    pub fn new(problem_id: ProblemId, weight: WeightChoice) -> Self {
        Self {
            problem_id,
            weight,
            alpha: 1e-8,
            outer_iters: 20,
            cg_max_iters: 200,
            cg_budget: 200,
            cg_tol: 1e-10,
            grad_tol: 1e-12,
            max_log_range: 40.0,
            noise_alpha_factor: 1e-6,
        }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.noise_alpha_factor >= 0.0) || !self.noise_alpha_factor.is_finite() {
            return Err(Error::InvalidParameter("noise_alpha_factor must be non-negative".into()));
        }
        if !(self.cg_tol > 0.0) || !(self.grad_tol >= 0.0) || !(self.max_log_range > 0.0) {
            return Err(Error::InvalidParameter("CG tolerance, gradient tolerance and log range must be positive".into()));
        }
        match (self.problem_id, &self.weight) {
            (ProblemId::P1, WeightChoice::Polynomial(w)) => w.validate(),
            (ProblemId::P2, WeightChoice::Power(w)) => {
                if (w.horizon - grid.t_end()).abs() > 1e-12 * w.horizon.max(1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "weight horizon {} differs from the grid end time {}",
                        w.horizon,
                        grid.t_end()
                    )));
                }
                w.validate(true)
            }
            (ProblemId::P1, _) => Err(Error::InvalidParameter("P1 uses the polynomial weight".into())),
            (ProblemId::P2, _) => Err(Error::InvalidParameter("P2 uses the power weight".into())),
        }
    }
}

/// Record of the `λ` actually used.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaClip {
    pub requested: f64,
    pub used: f64,
    pub clipped: bool,
    pub log_range_requested: f64,
    pub log_range_used: f64,
}

fn log_range(w: &WeightChoice, grid: &Grid) -> f64 {
    2.0 * (w.log_weight(grid.t_end()) - w.log_weight(grid.t_start())).abs()
}

/// Largest `λ ≤ requested` whose weight spans at most `max_log_range` in `log φ²`.
pub fn clip_lambda(weight: &WeightChoice, grid: &Grid, max_log_range: f64) -> (WeightChoice, LambdaClip) {
    let requested = weight.lambda();
    let range_req = log_range(weight, grid);
    if range_req <= max_log_range {
        return (
            *weight,
            LambdaClip { requested, used: requested, clipped: false, log_range_requested: range_req, log_range_used: range_req },
        );
    }
    let floor = match weight {
        WeightChoice::Polynomial(_) => 0.0,
        WeightChoice::Power(_) => 2.0,
    };
    let (mut lo, mut hi) = (floor, requested);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if log_range(&weight.with_lambda(mid), grid) <= max_log_range {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // stay strictly inside the admissible range of the family
    let used = if lo > floor { lo } else { 0.5 * (floor + hi) };
    let w = weight.with_lambda(used);
    (
        w,
        LambdaClip { requested, used, clipped: true, log_range_requested: range_req, log_range_used: log_range(&w, grid) },
    )
}

/// Data traces at `t = T` (P1) or `t = 0` (P2).
#[derive(Clone, Debug)]
pub struct DataTraces {
    pub u: SpatialField,
    pub m: SpatialField,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepType {
    Initial,
    GaussNewton,
    SteepestDescent,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    #[serde(rename = "J")]
    pub j: f64,
    pub grad_norm: f64,
    pub step_type: StepType,
    pub cg_iterations: usize,
    pub step_length: f64,
    /// The quadratic model never increased along the CG iterates.
    pub cg_model_monotone: bool,
    /// Relative diagonal shift of the banded Cholesky preconditioner;
    /// `None` when it failed and Jacobi was used.
    pub cholesky_shift: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    Stagnation,
    MaxIterations,
    CgBudget,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MinimizeReport {
    pub log: Vec<IterationRecord>,
    pub stop: StopReason,
    pub cg_iterations_total: usize,
    /// Normalized objective at the returned iterate.
    pub objective: f64,
    pub log_scale: f64,
}

/// Objective value and projected gradient.
#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub value: f64,
    pub residual_part: f64,
    pub regularization_part: f64,
    /// `log max φ²`; `value · e^{log_scale}` is the unnormalized objective.
    pub log_scale: f64,
    pub gradient_u: Field,
    pub gradient_m: Field,
}

/// Linearization of `(R_u, R_m)` at one iterate.
struct Linearization {
    residual: Vec<f64>,
    jac: CsrMatrix,
    /// `∂F/∂y` at every node; multiplies the nonlocal average of the `m` direction.
    f_y: Vec<f64>,
}

enum Preconditioner {
    Band(BandCholesky),
    Jacobi(Vec<f64>),
}

impl Preconditioner {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        match self {
            Self::Band(f) => f.solve(r),
            Self::Jacobi(inv) => r.iter().zip(inv).map(|(a, b)| a * b).collect(),
        }
    }
}

/// Precomputed operators for one grid, problem and weight.
pub struct Reconstructor {
    grid: Grid,
    problem: MfgProblem,
    config: ReconstructionConfig,
    clip: LambdaClip,
    data: DataTraces,
    constrained_level: usize,
    /// Normalized Carleman quadrature weights per node.
    w: Vec<f64>,
    log_scale: f64,
    alpha_eff: f64,
    /// Dense slice matrix of the nonlocal average, if the kernel is nonzero.
    interaction_dense: Option<Vec<f64>>,
    d_t: CsrMatrix,
    lap: CsrMatrix,
    grad: Vec<CsrMatrix>,
    /// `Σ Dᵀ diag(q) D` over the `H²(Q_T)` constituents.
    h2: CsrMatrix,
}

impl Reconstructor {
    pub fn new(problem: &MfgProblem, data: DataTraces, config: &ReconstructionConfig) -> Result<Self> {
        let grid = problem.grid;
        config.validate(&grid)?;
        for (name, f) in [("u", &data.u), ("m", &data.m)] {
            if !grid.same_shape(&f.grid().with_time(grid.t_end(), grid.time_len())?) {
                return Err(Error::ShapeMismatch(format!("data trace {name} does not match the grid")));
            }
        }
        let (weight, clip) = clip_lambda(&config.weight, &grid, config.max_log_range);
        let mut config = *config;
        config.weight = weight;
        let nt = grid.time_len();
        let logs: Vec<f64> = (0..nt).map(|n| 2.0 * weight.log_weight(grid.time(n))).collect();
        if logs.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("log of the Carleman weight".into()));
        }
        let log_scale = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let q = quadrature_weights(&grid);
        let ns = grid.spatial_len();
        let w: Vec<f64> = q.iter().enumerate().map(|(i, qi)| qi * (logs[i / ns] - log_scale).exp()).collect();
        let mut h2 = CsrMatrix::diagonal(&q);
        for d in constituents(NormKind::H2Q, grid.dim()).into_iter().flatten() {
            let dm = grid.derivative_matrix(d)?;
            h2 = h2.add(&dm.transpose().matmul(&dm.scale_rows(&q)));
        }
        Ok(Self {
            constrained_level: match config.problem_id {
                ProblemId::P1 => nt - 1,
                ProblemId::P2 => 0,
            },
            alpha_eff: config.alpha * (-log_scale).exp(),
            interaction_dense: {
                let op = problem.interaction_operator();
                (!op.is_zero()).then(|| op.dense())
            },
            d_t: grid.derivative_matrix(Derivative::T)?,
            lap: grid.derivative_matrix(Derivative::Laplacian)?,
            grad: (0..grid.dim()).map(|a| grid.derivative_matrix(Derivative::X(a))).collect::<Result<_>>()?,
            grid,
            problem: problem.clone(),
            config,
            clip,
            data,
            w,
            log_scale,
            h2,
        })
    }

    pub fn clip(&self) -> LambdaClip {
        self.clip
    }

    pub fn config(&self) -> &ReconstructionConfig {
        &self.config
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    fn n(&self) -> usize {
        self.grid.len()
    }

    /// Overwrites the constrained time level with the data (idempotent).
    pub fn project(&self, u: &Field, m: &Field) -> (Field, Field) {
        let (mut u, mut m) = (u.clone(), m.clone());
        u.set_trace(self.constrained_level, &self.data.u);
        m.set_trace(self.constrained_level, &self.data.m);
        (u, m)
    }

    fn zero_constrained(&self, v: &mut [f64]) {
        let ns = self.grid.spatial_len();
        let n = self.n();
        let lo = self.constrained_level * ns;
        for block in [0, n] {
            v[block + lo..block + lo + ns].iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn linearize(&self, u: &[f64], m: &[f64]) -> Linearization {
        let grid = &self.grid;
        let (ns, nt, n) = (grid.spatial_len(), grid.time_len(), self.n());
        let p = &self.problem;
        let r = p.r().values();
        let beta = p.beta;
        let grads: Vec<Vec<f64>> = self.grad.iter().map(|g| g.matvec(u)).collect();
        let ut = self.d_t.matvec(u);
        let lap_u = self.lap.matvec(u);
        let mt = self.d_t.matvec(m);
        let lap_m = self.lap.matvec(m);

        let op = p.interaction_operator();
        let coupling = &p.interaction.coupling;
        let mut y = Vec::with_capacity(n);
        for k in 0..nt {
            y.extend(op.apply(&m[k * ns..(k + 1) * ns]));
        }
        let mut res = vec![0.0; 2 * n];
        let mut f_y = vec![0.0; n];
        let mut f_z = vec![0.0; n];
        for i in 0..n {
            let g2: f64 = grads.iter().map(|g| g[i] * g[i]).sum();
            res[i] = ut[i] + beta * lap_u[i] - 0.5 * r[i % ns] * g2 + coupling.value(y[i], m[i]) - p.g1.values()[i];
            f_y[i] = coupling.d_y(y[i], m[i]);
            f_z[i] = coupling.d_z(y[i], m[i]);
        }
        // block-diagonal flux matrices, one slice per time level
        let mut flux_m = Vec::new();
        let mut flux_u = Vec::new();
        for k in 0..nt {
            let (us, ms) = (&u[k * ns..(k + 1) * ns], &m[k * ns..(k + 1) * ns]);
            let off = k * ns;
            let a = flux_matrix_in_m(grid, r, us);
            let div = a.matvec(ms);
            for (s, d) in div.iter().enumerate() {
                let i = off + s;
                res[n + i] = mt[i] - beta * lap_m[i] - d - p.g2.values()[i];
            }
            flux_m.extend(a.triplets().into_iter().map(|(i, j, v)| (off + i, off + j, -v)));
            let b = flux_matrix_in_u(grid, r, ms);
            flux_u.extend(b.triplets().into_iter().map(|(i, j, v)| (off + i, off + j, -v)));
        }
        let mut a_uu = self.d_t.add(&self.lap.scale(beta));
        for (g, dg) in grads.iter().zip(&self.grad) {
            let coef: Vec<f64> = (0..n).map(|i| -r[i % ns] * g[i]).collect();
            a_uu = a_uu.add(&dg.scale_rows(&coef));
        }
        let a_um = CsrMatrix::diagonal(&f_z);
        let a_mu = CsrMatrix::from_triplets(n, n, flux_u);
        let a_mm = self.d_t.add(&self.lap.scale(-beta)).add(&CsrMatrix::from_triplets(n, n, flux_m));
        Linearization {
            residual: res,
            jac: CsrMatrix::block2(&a_uu, &a_um, &a_mu, &a_mm),
            f_y,
        }
    }

    fn interaction_slices(&self, v: &[f64], transpose: bool) -> Vec<f64> {
        let ns = self.grid.spatial_len();
        let op = self.problem.interaction_operator();
        let mut out = Vec::with_capacity(v.len());
        for chunk in v.chunks_exact(ns) {
            out.extend(if transpose { op.apply_transpose(chunk) } else { op.apply(chunk) });
        }
        out
    }

    fn jac_apply(&self, lin: &Linearization, v: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = lin.jac.matvec(v);
        if !self.problem.interaction_operator().is_zero() {
            let avg = self.interaction_slices(&v[n..], false);
            for i in 0..n {
                out[i] += lin.f_y[i] * avg[i];
            }
        }
        out
    }

    fn jac_apply_transpose(&self, lin: &Linearization, w: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = lin.jac.matvec_transpose(w);
        if !self.problem.interaction_operator().is_zero() {
            let scaled: Vec<f64> = (0..n).map(|i| lin.f_y[i] * w[i]).collect();
            let back = self.interaction_slices(&scaled, true);
            for i in 0..n {
                out[n + i] += back[i];
            }
        }
        out
    }

    /// `JᵀWJ + αH` on the free nodes, identity on the constrained ones.
    fn normal_matrix(&self, lin: &Linearization) -> CsrMatrix {
        let (n, ns) = (self.n(), self.grid.spatial_len());
        let mut jac = lin.jac.clone();
        if let Some(d) = &self.interaction_dense {
            let mut t = Vec::new();
            for i in 0..n {
                let fy = lin.f_y[i];
                if fy == 0.0 {
                    continue;
                }
                let (base, s) = (i - i % ns, i % ns);
                for c in 0..ns {
                    t.push((i, n + base + c, fy * d[s * ns + c]));
                }
            }
            jac = jac.add(&CsrMatrix::from_triplets(2 * n, 2 * n, t));
        }
        let wv: Vec<f64> = (0..2 * n).map(|i| self.w[i % n]).collect();
        let h = self.h2.scale(self.alpha_eff);
        let zero = CsrMatrix::from_triplets(n, n, Vec::new());
        let m = jac.transpose().matmul(&jac.scale_rows(&wv)).add(&CsrMatrix::block2(&h, &zero, &zero, &h));
        let lo = self.constrained_level * ns;
        let fixed = |i: usize| (lo..lo + ns).contains(&(i % n));
        let mut t: Vec<_> = m.triplets().into_iter().filter(|&(i, j, _)| !fixed(i) && !fixed(j)).collect();
        t.extend((0..2 * n).filter(|&i| fixed(i)).map(|i| (i, i, 1.0)));
        CsrMatrix::from_triplets(2 * n, 2 * n, t)
    }

    /// Banded Cholesky of the normal matrix, shifted by a growing multiple of
    /// its largest diagonal entry until the factorization succeeds.
    fn preconditioner(&self, lin: &Linearization) -> (Preconditioner, Option<f64>) {
        let n = self.n();
        let m = self.normal_matrix(lin);
        // interleave u and m node by node so the band follows the time stencil
        let perm: Vec<usize> = (0..2 * n).map(|k| (k % 2) * n + k / 2).collect();
        let diag = m.diag();
        let dmax = diag.iter().cloned().fold(0.0, f64::max);
        for shift in [0.0, 1e-14, 1e-12, 1e-10, 1e-8, 1e-6] {
            let shifted = if shift == 0.0 { m.clone() } else { m.add(&CsrMatrix::diagonal(&vec![shift * dmax; 2 * n])) };
            if let Some(f) = BandCholesky::factor(&shifted, &perm) {
                return (Preconditioner::Band(f), Some(shift));
            }
        }
        (Preconditioner::Jacobi(diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect()), None)
    }

    fn split_values(&self, lin: &Linearization, x: &[f64]) -> (f64, f64) {
        let n = self.n();
        let res: f64 = (0..2 * n).map(|i| self.w[i % n] * lin.residual[i] * lin.residual[i]).sum();
        let hu = self.h2.matvec(&x[..n]);
        let hm = self.h2.matvec(&x[n..]);
        let reg: f64 = x[..n].iter().zip(&hu).map(|(a, b)| a * b).sum::<f64>()
            + x[n..].iter().zip(&hm).map(|(a, b)| a * b).sum::<f64>();
        (res, self.alpha_eff * reg)
    }

    fn gradient(&self, lin: &Linearization, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let wr: Vec<f64> = (0..2 * n).map(|i| self.w[i % n] * lin.residual[i]).collect();
        let mut g = self.jac_apply_transpose(lin, &wr);
        let hu = self.h2.matvec(&x[..n]);
        let hm = self.h2.matvec(&x[n..]);
        for i in 0..n {
            g[i] = 2.0 * (g[i] + self.alpha_eff * hu[i]);
            g[n + i] = 2.0 * (g[n + i] + self.alpha_eff * hm[i]);
        }
        self.zero_constrained(&mut g);
        g
    }

    fn stack(&self, u: &Field, m: &Field) -> Result<Vec<f64>> {
        for f in [u, m] {
            if !self.grid.same_shape(f.grid()) {
                return Err(Error::ShapeMismatch("iterate does not live on the reconstruction grid".into()));
            }
        }
        let mut x = u.values().to_vec();
        x.extend_from_slice(m.values());
        Ok(x)
    }

    fn unstack(&self, x: &[f64]) -> Result<(Field, Field)> {
        let n = self.n();
        Ok((Field::new(self.grid, x[..n].to_vec())?, Field::new(self.grid, x[n..].to_vec())?))
    }

    fn value_at(&self, x: &[f64]) -> Result<f64> {
        let n = self.n();
        let lin = self.linearize(&x[..n], &x[n..]);
        let (a, b) = self.split_values(&lin, x);
        let v = a + b;
        if !v.is_finite() {
            return Err(Error::NonFinite("reconstruction objective".into()));
        }
        Ok(v)
    }

    /// Objective and projected gradient at the projection of `(u, m)`.
    pub fn objective_and_gradient(&self, u: &Field, m: &Field) -> Result<ObjectiveValue> {
        let (u, m) = self.project(u, m);
        let x = self.stack(&u, &m)?;
        let n = self.n();
        let lin = self.linearize(&x[..n], &x[n..]);
        let (res, reg) = self.split_values(&lin, &x);
        if !(res + reg).is_finite() {
            return Err(Error::NonFinite("reconstruction objective".into()));
        }
        let g = self.gradient(&lin, &x);
        let (gu, gm) = self.unstack(&g)?;
        Ok(ObjectiveValue {
            value: res + reg,
            residual_part: res,
            regularization_part: reg,
            log_scale: self.log_scale,
            gradient_u: gu,
            gradient_m: gm,
        })
    }

    /// Objective at the projection of `(u, m)`.
    pub fn objective(&self, u: &Field, m: &Field) -> Result<f64> {
        let (u, m) = self.project(u, m);
        self.value_at(&self.stack(&u, &m)?)
    }

    /// Independent evaluation of the objective through the residual functions,
    /// the weight formula and the Sobolev norm routine.
    pub fn certificate(&self, u: &Field, m: &Field) -> Result<f64> {
        let ru = residual_u(u, m, &self.problem)?;
        let rm = residual_m(u, m, &self.problem)?;
        let weight = self.config.weight;
        let scale = self.log_scale;
        let grid = self.grid;
        let weighted = |r: &Field| -> Result<f64> {
            let mut f = r.map(|v| v * v);
            for n in 0..grid.time_len() {
                let c = (2.0 * weight.log_weight(grid.time(n)) - scale).exp();
                f.slice_mut(n).iter_mut().for_each(|v| *v *= c);
            }
            grid.integrate(&f, Region::Full)
        };
        let reg = norm(u, NormKind::H2Q, Region::Full)?.powi(2) + norm(m, NormKind::H2Q, Region::Full)?.powi(2);
        Ok(weighted(&ru)? + weighted(&rm)? + self.config.alpha * (-scale).exp() * reg)
    }

    /// Gauss–Newton with inner preconditioned CG and backtracking line search.
    pub fn minimize(&self, u0: &Field, m0: &Field) -> Result<(Field, Field, MinimizeReport)> {
        let (u0, m0) = self.project(u0, m0);
        let mut x = self.stack(&u0, &m0)?;
        let n = self.n();
        let cfg = &self.config;
        let mut log = Vec::new();
        let mut cg_total = 0;
        let mut stop = StopReason::MaxIterations;
        let mut lin = self.linearize(&x[..n], &x[n..]);
        let (a, b) = self.split_values(&lin, &x);
        let mut j = a + b;
        let mut g = self.gradient(&lin, &x);
        log.push(IterationRecord {
            iter: 0,
            j,
            grad_norm: crate::linalg::norm2(&g),
            step_type: StepType::Initial,
            cg_iterations: 0,
            step_length: 0.0,
            cg_model_monotone: true,
            cholesky_shift: None,
        });
        for iter in 1..=cfg.outer_iters {
            let gnorm = crate::linalg::norm2(&g);
            if gnorm <= cfg.grad_tol {
                stop = StopReason::GradientTolerance;
                break;
            }
            if cg_total >= cfg.cg_budget {
                stop = StopReason::CgBudget;
                break;
            }
            let apply = |v: &[f64]| -> Vec<f64> {
                let mut v = v.to_vec();
                self.zero_constrained(&mut v);
                let jv = self.jac_apply(&lin, &v);
                let wjv: Vec<f64> = jv.iter().enumerate().map(|(i, a)| self.w[i % n] * a).collect();
                let mut out = self.jac_apply_transpose(&lin, &wjv);
                if self.alpha_eff > 0.0 {
                    let hu = self.h2.matvec(&v[..n]);
                    let hm = self.h2.matvec(&v[n..]);
                    for i in 0..n {
                        out[i] += self.alpha_eff * hu[i];
                        out[n + i] += self.alpha_eff * hm[i];
                    }
                }
                self.zero_constrained(&mut out);
                out
            };
            let (precond, shift) = self.preconditioner(&lin);
            let rhs: Vec<f64> = g.iter().map(|v| -0.5 * v).collect();
            let mut delta = vec![0.0; 2 * n];
            let budget = cfg.cg_max_iters.min(cfg.cg_budget - cg_total);
            let info = pcg_with(apply, |r| precond.apply(r), &rhs, &mut delta, cfg.cg_tol, budget);
            cg_total += info.iterations;
            let model_monotone = info.model_history.windows(2).all(|w| w[1] <= w[0] + 1e-15 * w[0].abs().max(1e-300));
            self.zero_constrained(&mut delta);
            let slope = |d: &[f64]| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
            let mut step_type = StepType::GaussNewton;
            if info.iterations == 0 || !(slope(&delta) < 0.0) {
                // steepest descent with the Cauchy step of the quadratic model
                let mg = {
                    let f = |v: &[f64]| -> Vec<f64> {
                        let jv = self.jac_apply(&lin, v);
                        let wjv: Vec<f64> = jv.iter().enumerate().map(|(i, a)| self.w[i % n] * a).collect();
                        self.jac_apply_transpose(&lin, &wjv)
                    };
                    f(&g)
                };
                let gmg: f64 = g.iter().zip(&mg).map(|(a, b)| a * b).sum();
                let tau = if gmg > 0.0 { gnorm * gnorm / (2.0 * gmg) } else { 1.0 };
                delta = g.iter().map(|v| -tau * v).collect();
                step_type = StepType::SteepestDescent;
            }
            let dir_slope = slope(&delta);
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..50 {
                let trial: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + t * d).collect();
                if let Ok(jt) = self.value_at(&trial) {
                    if jt <= j + 1e-4 * t * dir_slope {
                        accepted = Some((trial, jt));
                        break;
                    }
                }
                t *= 0.5;
            }
            let Some((trial, jt)) = accepted else {
                log.push(IterationRecord {
                    iter,
                    j,
                    grad_norm: gnorm,
                    step_type: StepType::Rejected,
                    cg_iterations: info.iterations,
                    step_length: 0.0,
                    cg_model_monotone: model_monotone,
                    cholesky_shift: shift,
                });
                stop = StopReason::Stagnation;
                break;
            };
            let decrease = j - jt;
            x = trial;
            j = jt;
            lin = self.linearize(&x[..n], &x[n..]);
            g = self.gradient(&lin, &x);
            log.push(IterationRecord {
                iter,
                j,
                grad_norm: crate::linalg::norm2(&g),
                step_type,
                cg_iterations: info.iterations,
                step_length: t,
                cg_model_monotone: model_monotone,
                cholesky_shift: shift,
            });
            if decrease <= 1e-14 * j.abs() {
                stop = StopReason::Stagnation;
                break;
            }
        }
        if stop == StopReason::MaxIterations && crate::linalg::norm2(&g) <= cfg.grad_tol {
            stop = StopReason::GradientTolerance;
        }
        let (u, m) = self.unstack(&x)?;
        Ok((
            u,
            m,
            MinimizeReport {
                log,
                stop,
                cg_iterations_total: cg_total,
                objective: j,
                log_scale: self.log_scale,
            },
        ))
    }

    /// Starting guess: the data traces held constant in time.
    pub fn data_extension(&self) -> (Field, Field) {
        let mut u = Field::zeros(self.grid);
        let mut m = Field::zeros(self.grid);
        for n in 0..self.grid.time_len() {
            u.set_trace(n, &self.data.u);
            m.set_trace(n, &self.data.m);
        }
        (u, m)
    }
}

fn quadrature_weights(grid: &Grid) -> Vec<f64> {
    let ws = grid.spatial_weights();
    let wt = grid.time_weights(0, grid.time_len() - 1);
    let mut q = Vec::with_capacity(grid.len());
    for t in &wt {
        q.extend(ws.iter().map(|s| s * t));
    }
    q
}

/// Convenience wrapper around [`Reconstructor::objective_and_gradient`].
pub fn objective_and_gradient(
    u: &Field,
    m: &Field,
    problem: &MfgProblem,
    data: DataTraces,
    config: &ReconstructionConfig,
) -> Result<ObjectiveValue> {
    Reconstructor::new(problem, data, config)?.objective_and_gradient(u, m)
}

/// Convenience wrapper around [`Reconstructor::minimize`] from the data extension.
pub fn minimize(problem: &MfgProblem, data: DataTraces, config: &ReconstructionConfig) -> Result<(Field, Field, MinimizeReport)> {
    let rec = Reconstructor::new(problem, data, config)?;
    let (u0, m0) = rec.data_extension();
    rec.minimize(&u0, &m0)
}

/// Relative errors of one reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSet {
    pub u_l2_rel: f64,
    pub m_l2_rel: f64,
    /// `H^{2,1}` (P1) or `H^{1,0}` (P2) on the restricted domain.
    pub u_theorem_rel: f64,
    /// `H^{1,0}` on the restricted domain.
    pub m_theorem_rel: f64,
}

impl ErrorSet {
    pub fn l2_max(&self) -> f64 {
        self.u_l2_rel.max(self.m_l2_rel)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub seed: u64,
    #[serde(default)]
    pub spectrum: Spectrum,
    /// Strictly decreasing positive noise levels.
    pub delta_levels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReconstructionReport {
    pub problem_id: ProblemId,
    pub grid: GridSpec,
    pub epsilon: f64,
    pub epsilon_snapped: f64,
    pub weight: WeightChoice,
    pub lambda_clip: LambdaClip,
    pub alpha: f64,
    pub noiseless: ErrorSet,
    pub delta_levels: Vec<f64>,
    pub noisy: Vec<ErrorSet>,
    pub noisy_alpha: Vec<f64>,
    /// Log-log slope of the `L₂` error against `δ` along the ladder.
    pub error_slope: Option<f64>,
    pub rho_or_eta_theory: Option<f64>,
    pub error_nonincreasing: bool,
    #[serde(rename = "J")]
    pub objective: f64,
    pub log_scale: f64,
    #[serde(rename = "J_certificate")]
    pub certificate: f64,
    pub certificate_rel_gap: f64,
    pub cg_iterations_total: usize,
    pub stop: StopReason,
    pub iterations: Vec<IterationRecord>,
    pub error_tolerance: f64,
    pub pass: bool,
}

fn errors(problem: ProblemId, u: &Field, m: &Field, truth: (&Field, &Field), region: Region) -> Result<ErrorSet> {
    let rel = |a: &Field, b: &Field, k: NormKind| -> Result<f64> {
        let d = norm(&a.sub(b)?, k, region)?;
        let s = norm(b, k, region)?;
        Ok(if s > 0.0 { d / s } else { d })
    };
    let uk = match problem {
        ProblemId::P1 => NormKind::H21Q,
        ProblemId::P2 => NormKind::H10Q,
    };
    Ok(ErrorSet {
        u_l2_rel: rel(u, truth.0, NormKind::L2Q)?,
        m_l2_rel: rel(m, truth.1, NormKind::L2Q)?,
        u_theorem_rel: rel(u, truth.0, uk)?,
        m_theorem_rel: rel(m, truth.1, NormKind::H10Q)?,
    })
}

/// Runs the noiseless reconstruction and the noise ladder against a known truth.
///
/// `error_tolerance` bounds the noiseless relative `L₂` error on the restricted domain.
pub fn reconstruct_and_score(
    problem: &MfgProblem,
    config: &ReconstructionConfig,
    truth: (&Field, &Field),
    epsilon: f64,
    noise: &NoiseSpec,
    error_tolerance: f64,
) -> Result<ReconstructionReport> {
    let grid = problem.grid;
    let horizon = grid.t_end();
    if !(epsilon > 0.0 && epsilon < horizon) {
        return Err(Error::InvalidParameter(format!("epsilon must lie in (0, {horizon}), got {epsilon}")));
    }
    for &d in &noise.delta_levels {
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::InvalidParameter(format!("noise levels must be positive, got {d}")));
        }
    }
    if noise.delta_levels.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidParameter("noise levels must be strictly decreasing".into()));
    }
    let level = match config.problem_id {
        ProblemId::P1 => grid.time_len() - 1,
        ProblemId::P2 => 0,
    };
    let clean = DataTraces { u: truth.0.trace(level), m: truth.1.trace(level) };
    let (region, (lo, hi)) = match config.problem_id {
        ProblemId::P1 => (Region::Slab { t_lo: epsilon, t_hi: horizon }, grid.snapped_slab(epsilon, horizon)?),
        ProblemId::P2 => (Region::Slab { t_lo: 0.0, t_hi: horizon - epsilon }, grid.snapped_slab(0.0, horizon - epsilon)?),
    };
    let epsilon_snapped = match config.problem_id {
        ProblemId::P1 => lo,
        ProblemId::P2 => horizon - hi,
    };

    let run = |data: DataTraces, config: &ReconstructionConfig| -> Result<(Reconstructor, Field, Field, MinimizeReport)> {
        let rec = Reconstructor::new(problem, data, config)?;
        let (u0, m0) = rec.data_extension();
        let (u, m, rep) = rec.minimize(&u0, &m0)?;
        Ok((rec, u, m, rep))
    };
    let (rec, u, m, rep) = run(clean.clone(), config)?;
    let noiseless = errors(config.problem_id, &u, &m, truth, region)?;
    let certificate = rec.certificate(&u, &m)?;
    let certificate_rel_gap = (certificate - rep.objective).abs() / rep.objective.abs().max(f64::MIN_POSITIVE);

    let mut noisy = Vec::new();
    // one noise shape, rescaled along the ladder
    let shape_u = random_neumann_field(&grid, &noise.spectrum, noise.seed, Some((NormKind::H1OmegaAt, 1.0)))?;
    let shape_m = random_neumann_field(&grid, &noise.spectrum, noise.seed.wrapping_add(1), Some((NormKind::L2OmegaAt, 1.0)))?;
    let mut noisy_alpha = Vec::new();
    for &d in &noise.delta_levels {
        let data = DataTraces { u: clean.u.add(&shape_u.scale(d))?, m: clean.m.add(&shape_m.scale(d))? };
        let alpha = config.alpha.max(config.noise_alpha_factor * d * d * rec.log_scale().exp());
        noisy_alpha.push(alpha);
        let (_, un, mn, _) = run(data, &ReconstructionConfig { alpha, ..*config })?;
        noisy.push(errors(config.problem_id, &un, &mn, truth, region)?);
    }
    let error_nonincreasing = noisy.windows(2).all(|w| w[1].l2_max() <= w[0].l2_max());
    let error_slope = if noisy.len() >= 2 {
        let x: Vec<f64> = noise.delta_levels.iter().map(|d| d.ln()).collect();
        let y: Vec<f64> = noisy.iter().map(|e| e.l2_max().ln()).collect();
        let k = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / k, y.iter().sum::<f64>() / k);
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        Some(sxy / sxx)
    } else {
        None
    };
    let rho_or_eta_theory = match rec.config().weight {
        WeightChoice::Polynomial(w) => parameter_formulas(horizon, epsilon, w.k, None).ok().map(|p| p.rho),
        WeightChoice::Power(w) => parameter_formulas(horizon, epsilon, 3.0, Some(w.c)).ok().map(|p| p.eta),
    };
    let pass = noiseless.l2_max() < error_tolerance && error_nonincreasing && certificate_rel_gap <= 1e-10;
    Ok(ReconstructionReport {
        problem_id: config.problem_id,
        grid: grid.spec(),
        epsilon,
        epsilon_snapped,
        weight: rec.config().weight,
        lambda_clip: rec.clip(),
        alpha: config.alpha,
        noiseless,
        delta_levels: noise.delta_levels.clone(),
        noisy,
        noisy_alpha,
        error_slope,
        rho_or_eta_theory,
        error_nonincreasing,
        objective: rep.objective,
        log_scale: rep.log_scale,
        certificate,
        certificate_rel_gap,
        cg_iterations_total: rep.cg_iterations_total,
        stop: rep.stop,
        iterations: rep.log,
        error_tolerance,
        pass,
    })
}

/// Parameters of the estimate family matching a reconstruction weight (for reporting).
pub fn estimate_params(config: &ReconstructionConfig, beta: f64) -> EstimateParams {
    EstimateParams { beta, weight: config.weight, k0: 4.0, allow_below_threshold: true }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::carleman::{Weight1Params, Weight2Params};
    use crate::grid::GridSpec;
    use crate::scenario::ScenarioSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p1_config() -> ReconstructionConfig {
        ReconstructionConfig::new(ProblemId::P1, WeightChoice::Polynomial(Weight1Params { b: 1.0, lambda: 2.0, k: 3.0 }))
    }

    fn scenario(n: usize, nt: usize) -> crate::mfg_system::ManufacturedProblem {
        ScenarioSpec::reference(GridSpec { extents: vec![(0.0, 1.0)], nodes: vec![n], horizon: 1.0, time_nodes: nt })
            .build()
            .unwrap()
    }

    fn traces(mp: &crate::mfg_system::ManufacturedProblem) -> DataTraces {
        DataTraces { u: mp.u_terminal(), m: mp.m_terminal() }
    }

    #[test]
    fn clip_records_requested_and_used() {
        let g = Grid::new(&[(0.0, 1.0)], &[9], 1.0, 9).unwrap();
        let c = crate::carleman::default_c(1.0);
        let w = WeightChoice::Power(Weight2Params { c, lambda: crate::carleman::lambda0(1.0, c), horizon: 1.0 });
        let (used, clip) = clip_lambda(&w, &g, 40.0);
        assert!(clip.clipped && clip.used < clip.requested && clip.used > 2.0);
        assert!(clip.log_range_used <= 40.0 + 1e-9);
        assert_eq!(used.k_or_c(), c);
        let (_, none) = clip_lambda(&p1_config().weight, &g, 40.0);
        assert!(!none.clipped);
    }

    #[test]
    fn projection_is_idempotent() {
        let mp = scenario(9, 9);
        let rec = Reconstructor::new(&mp.problem, traces(&mp), &p1_config()).unwrap();
        let (u0, m0) = (Field::constant(mp.problem.grid, 0.3), Field::zeros(mp.problem.grid));
        let (u1, m1) = rec.project(&u0, &m0);
        let (u2, m2) = rec.project(&u1, &m1);
        assert_eq!(u1.values(), u2.values());
        assert_eq!(m1.values(), m2.values());
        assert_eq!(u1.trace(8).values(), mp.u_terminal().values());
    }

    #[test]
    fn zero_data_zero_sources_give_zero_objective() {
        let g = Grid::new(&[(0.0, 1.0)], &[9], 1.0, 9).unwrap();
        let p = MfgProblem::homogeneous(g, 0.1, Default::default(), Default::default(), Default::default()).unwrap();
        let data = DataTraces { u: SpatialField::zeros(g), m: SpatialField::zeros(g) };
        let ov = objective_and_gradient(&Field::zeros(g), &Field::zeros(g), &p, data, &p1_config()).unwrap();
        assert_eq!(ov.value, 0.0);
        assert_eq!(ov.gradient_u.sup_abs(), 0.0);
    }

    #[test]
    fn exact_discrete_solution_stops_immediately() {
        let mp = scenario(17, 17);
        let prob = mp.problem.with_discrete_sources(&mp.u, &mp.m).unwrap();
        let cfg = ReconstructionConfig { alpha: 0.0, grad_tol: 1e-9, ..p1_config() };
        let rec = Reconstructor::new(&prob, traces(&mp), &cfg).unwrap();
        let (_, _, rep) = rec.minimize(&mp.u, &mp.m).unwrap();
        assert_eq!(rep.stop, StopReason::GradientTolerance);
        assert_eq!(rep.cg_iterations_total, 0);
    }

    #[test]
    fn exact_solution_sits_at_the_quadrature_floor() {
        let mp = scenario(33, 65);
        let cfg = ReconstructionConfig { alpha: 0.0, ..p1_config() };
        let rec = Reconstructor::new(&mp.problem, traces(&mp), &cfg).unwrap();
        let j_exact = rec.objective(&mp.u, &mp.m).unwrap();
        let pert = Field::from_fn(mp.problem.grid, |x, t| 0.01 * t * (2.0 * std::f64::consts::PI * x[0]).cos());
        let j_pert = rec.objective(&mp.u.add(&pert).unwrap(), &mp.m).unwrap();
        assert!(j_exact < 1e-3 * j_pert, "{j_exact} {j_pert}");
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let mp = scenario(17, 17);
        let g = mp.problem.grid;
        let rec = Reconstructor::new(&mp.problem, traces(&mp), &p1_config()).unwrap();
        let base_u = mp.u.add(&Field::from_fn(g, |x, t| 0.05 * (1.0 - t) * (3.0 * x[0]).cos())).unwrap();
        let base_m = mp.m.add(&Field::from_fn(g, |x, t| 0.03 * (1.0 - t) * (2.0 * x[0]).cos())).unwrap();
        let ov = rec.objective_and_gradient(&base_u, &base_m).unwrap();
        let (bu, bm) = rec.project(&base_u, &base_m);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut du = Field::new(g, (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let mut dm = Field::new(g, (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let last = g.time_len() - 1;
            du.set_trace(last, &SpatialField::zeros(g));
            dm.set_trace(last, &SpatialField::zeros(g));
            let h = 1e-6;
            let jp = rec.objective(&bu.add(&du.scale(h)).unwrap(), &bm.add(&dm.scale(h)).unwrap()).unwrap();
            let jm = rec.objective(&bu.add(&du.scale(-h)).unwrap(), &bm.add(&dm.scale(-h)).unwrap()).unwrap();
            let fd = (jp - jm) / (2.0 * h);
            let an: f64 = ov.gradient_u.values().iter().zip(du.values()).map(|(a, b)| a * b).sum::<f64>()
                + ov.gradient_m.values().iter().zip(dm.values()).map(|(a, b)| a * b).sum::<f64>();
            assert!((fd - an).abs() <= 1e-5 * an.abs(), "{fd} {an}");
        }
    }

    #[test]
    fn certificate_matches_objective() {
        let mp = scenario(17, 17);
        let rec = Reconstructor::new(&mp.problem, traces(&mp), &p1_config()).unwrap();
        let (u, m) = rec.data_extension();
        let a = rec.objective(&u, &m).unwrap();
        let b = rec.certificate(&u, &m).unwrap();
        assert!((a - b).abs() <= 1e-10 * a, "{a} {b}");
    }

    #[test]
    fn family_must_match_problem() {
        let mp = scenario(9, 9);
        let cfg = ReconstructionConfig { problem_id: ProblemId::P2, ..p1_config() };
        assert!(Reconstructor::new(&mp.problem, traces(&mp), &cfg).is_err());
        let neg = ReconstructionConfig { alpha: -1.0, ..p1_config() };
        assert!(Reconstructor::new(&mp.problem, traces(&mp), &neg).is_err());
    }
}
