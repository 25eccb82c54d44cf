//! Picard iteration for the conventional data `u(·, T) = u_T`, `m(·, 0) = m₀`.
//!
//! Each outer iteration marches the HJB equation backward with `m` frozen and
//! the Fokker–Planck equation forward with `u` frozen, both by implicit Euler.
//! The `r|∇u|²/2` term is lagged one time level so every step is linear.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{norm, Field, Grid, NormKind, Region, SpatialDerivative, SpatialField};
use crate::linalg::{bicgstab, pcg, solve_tridiagonal};
use crate::mfg_system::{flux_matrix_in_m, for_each_face, scheme_residuals, AdmissibleSetCheck, MfgProblem};
use crate::sparse::CsrMatrix;

/// Starting point of the outer iteration.
#[derive(Clone, Debug, Default)]
pub enum InitialGuess {
    #[default]
    Zero,
    Provided { u: Field, m: Field },
}

#[derive(Clone, Debug)]
pub struct PicardOptions {
    pub max_outer_iters: usize,
    /// Damping `θ` in `u ← θ u_new + (1 − θ) u_old`; the first sweep is undamped.
    pub theta: f64,
    /// Tolerance on `max(‖R_u‖, ‖R_m‖)` in `L₂(Q_T)`.
    pub tol_res: f64,
    pub linear_tol: f64,
    pub initial_guess: InitialGuess,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            max_outer_iters: 200,
            theta: 0.5,
            tol_res: 1e-10,
            linear_tol: 1e-14,
            initial_guess: InitialGuess::Zero,
        }
    }
}

impl PicardOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::InvalidParameter(format!("damping must lie in (0, 1], got {}", self.theta)));
        }
        if !(self.tol_res > 0.0) || !(self.linear_tol > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        if self.max_outer_iters == 0 {
            return Err(Error::InvalidParameter("max_outer_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// `(‖R_u‖, ‖R_m‖)` in `L₂(Q_T)` after each outer iteration.
    pub residual_history: Vec<(f64, f64)>,
    pub converged: bool,
    pub admissibility: AdmissibleSetCheck,
}

impl SolveReport {
    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().map_or(f64::INFINITY, |&(a, b)| a.max(b))
    }
}

/// Per-grid operators shared by every time step.
struct Operators {
    lap: CsrMatrix,
    dx: Vec<CsrMatrix>,
    weights: Vec<f64>,
}

impl Operators {
    fn new(grid: &Grid) -> Result<Self> {
        let lap = grid.spatial_matrix(SpatialDerivative::Laplacian)?;
        let dx = (0..grid.dim())
            .map(|a| grid.spatial_matrix(SpatialDerivative::X(a)))
            .collect::<Result<_>>()?;
        Ok(Self { lap, dx, weights: grid.spatial_weights() })
    }

    fn grad_sq(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        for d in &self.dx {
            for (o, g) in out.iter_mut().zip(d.matvec(u)) {
                *o += g * g;
            }
        }
        out
    }
}

/// `I − dt·β·L − dt·extra`.
fn step_matrix(ops: &Operators, dt: f64, beta: f64, extra: Option<&CsrMatrix>) -> CsrMatrix {
    let n = ops.weights.len();
    let mut a = CsrMatrix::identity(n).add(&ops.lap.scale(-dt * beta));
    if let Some(e) = extra {
        a = a.add(&e.scale(-dt));
    }
    a
}

/// Bands of a 1-d step matrix (three-point stencils only).
fn tridiagonal(a: &CsrMatrix) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = a.nrows();
    let (mut lo, mut di, mut up) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        for (c, v) in a.row(i) {
            if c + 1 == i {
                lo[i] = v;
            } else if c == i {
                di[i] = v;
            } else {
                debug_assert_eq!(c, i + 1);
                up[i] = v;
            }
        }
    }
    (lo, di, up)
}

/// Solves `A x = rhs`: Thomas in 1D, weighted CG or BiCGSTAB in 2D.
fn linear_solve(grid: &Grid, a: &CsrMatrix, rhs: &[f64], x0: &[f64], ops: &Operators, symmetric: bool, tol: f64) -> Result<Vec<f64>> {
    let n = rhs.len();
    if grid.dim() == 1 {
        let (lo, di, up) = tridiagonal(a);
        return solve_tridiagonal(&lo, &di, &up, rhs);
    }
    let mut x = x0.to_vec();
    let info = if symmetric {
        // The mirror Laplacian is self-adjoint in the trapezoid inner product.
        let wa = a.scale_rows(&ops.weights);
        let wb: Vec<f64> = rhs.iter().zip(&ops.weights).map(|(b, w)| b * w).collect();
        pcg(|v| wa.matvec(v), &wa.diag(), &wb, &mut x, tol, 20 * n)
    } else {
        bicgstab(|v| a.matvec(v), &a.diag(), rhs, &mut x, tol, 20 * n)
    };
    if !info.converged {
        return Err(Error::LinearSolve(format!(
            "Krylov solve stopped after {} iterations with residual {:.3e}",
            info.iterations, info.residual_norm
        )));
    }
    Ok(x)
}

fn check_trace(grid: &Grid, trace: &SpatialField, what: &str) -> Result<()> {
    if trace.grid().spatial_dims() != grid.spatial_dims() {
        return Err(Error::ShapeMismatch(format!("{what} does not match the spatial grid")));
    }
    if trace.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn hjb_march(m: &Field, prob: &MfgProblem, u_t: &SpatialField, ops: &Operators, tol: f64) -> Result<Field> {
    let grid = prob.grid;
    let (ns, nt, dt) = (grid.spatial_len(), grid.time_len(), grid.dt());
    let inter = prob.interaction_field(m);
    let a = step_matrix(ops, dt, prob.beta, None);
    let bands = (grid.dim() == 1).then(|| tridiagonal(&a));
    let r = prob.r().values();
    let limit = 10.0 * prob.bounds.d3;
    let mut u = vec![0.0; grid.len()];
    u[(nt - 1) * ns..].copy_from_slice(u_t.values());
    for n in (0..nt - 1).rev() {
        let (head, tail) = u.split_at_mut((n + 1) * ns);
        let next = &tail[..ns];
        let g = ops.grad_sq(next);
        let base = n * ns;
        let rhs: Vec<f64> = (0..ns)
            .map(|s| next[s] + dt * (-0.5 * r[s] * g[s] + inter.values()[base + s] - prob.g1.values()[base + s]))
            .collect();
        let sol = match &bands {
            Some((lo, di, up)) => solve_tridiagonal(lo, di, up, &rhs)?,
            None => linear_solve(&grid, &a, &rhs, next, ops, true, tol)?,
        };
        let s = sup(&sol);
        if !s.is_finite() || s > limit {
            return Err(Error::BlowUp { equation: "HJB", step: n, sup: s, limit });
        }
        head[base..].copy_from_slice(&sol);
    }
    Field::new(grid, u)
}

fn fp_march(u: &Field, prob: &MfgProblem, m_0: &SpatialField, ops: &Operators, tol: f64) -> Result<Field> {
    let grid = prob.grid;
    let (ns, nt, dt) = (grid.spatial_len(), grid.time_len(), grid.dt());
    let r = prob.r().values();
    let limit = 10.0 * prob.bounds.d4;
    let base_tri = (grid.dim() == 1).then(|| tridiagonal(&step_matrix(ops, dt, prob.beta, None)));
    let mut m = vec![0.0; grid.len()];
    m[..ns].copy_from_slice(m_0.values());
    for n in 1..nt {
        let base = n * ns;
        let (head, tail) = m.split_at_mut(base);
        let prev = &head[base - ns..];
        let rhs: Vec<f64> = (0..ns).map(|s| prev[s] + dt * prob.g2.values()[base + s]).collect();
        let sol = match &base_tri {
            Some((lo, di, up)) => {
                // subtract dt·div(r m ∇u) face by face
                let (mut lo, mut di, mut up) = (lo.clone(), di.clone(), up.clone());
                let un = u.slice(n);
                for_each_face(&grid, |l, rr, h, ls, rs| {
                    let c = dt * 0.5 * (r[l] + r[rr]) * 0.5 * (un[rr] - un[l]) / h;
                    di[l] -= ls * c;
                    up[l] -= ls * c;
                    lo[rr] += rs * c;
                    di[rr] += rs * c;
                });
                solve_tridiagonal(&lo, &di, &up, &rhs)?
            }
            None => {
                let d = flux_matrix_in_m(&grid, r, u.slice(n));
                let a = step_matrix(ops, dt, prob.beta, Some(&d));
                linear_solve(&grid, &a, &rhs, prev, ops, false, tol)?
            }
        };
        let s = sup(&sol);
        if !s.is_finite() || s > limit {
            return Err(Error::BlowUp { equation: "Fokker-Planck", step: n, sup: s, limit });
        }
        tail[..ns].copy_from_slice(&sol);
    }
    Field::new(grid, m)
}

/// Backward implicit-Euler march of the HJB equation with `m` frozen.
pub fn solve_hjb_backward(m: &Field, prob: &MfgProblem, u_t: &SpatialField) -> Result<Field> {
    check_trace(&prob.grid, u_t, "terminal value u_T")?;
    if !prob.grid.same_shape(m.grid()) {
        return Err(Error::ShapeMismatch("m does not live on the problem grid".into()));
    }
    let ops = Operators::new(&prob.grid)?;
    hjb_march(m, prob, u_t, &ops, PicardOptions::default().linear_tol)
}

/// Forward implicit-Euler march of the Fokker–Planck equation with `u` frozen.
pub fn solve_fp_forward(u: &Field, prob: &MfgProblem, m_0: &SpatialField) -> Result<Field> {
    check_trace(&prob.grid, m_0, "initial value m_0")?;
    if !prob.grid.same_shape(u.grid()) {
        return Err(Error::ShapeMismatch("u does not live on the problem grid".into()));
    }
    let ops = Operators::new(&prob.grid)?;
    fp_march(u, prob, m_0, &ops, PicardOptions::default().linear_tol)
}

fn blend(theta: f64, new: &Field, old: &Field) -> Field {
    new.zip_map(old, |a, b| theta * a + (1.0 - theta) * b).expect("same grid")
}

fn residual_norms(u: &Field, m: &Field, prob: &MfgProblem) -> Result<(f64, f64)> {
    let (ru, rm) = scheme_residuals(u, m, prob)?;
    Ok((norm(&ru, NormKind::L2Q, Region::Full)?, norm(&rm, NormKind::L2Q, Region::Full)?))
}

/// Damped Picard iteration between the two sweeps.
///
/// Non-convergence is not an error: the best iterate is returned with
/// `converged = false`. Blow-up and linear-solve failures abort.
pub fn solve_conventional(
    prob: &MfgProblem,
    u_t: &SpatialField,
    m_0: &SpatialField,
    opts: &PicardOptions,
) -> Result<(Field, Field, SolveReport)> {
    opts.validate()?;
    check_trace(&prob.grid, u_t, "terminal value u_T")?;
    check_trace(&prob.grid, m_0, "initial value m_0")?;
    let grid = prob.grid;
    let ops = Operators::new(&grid)?;
    let (mut u, mut m) = match &opts.initial_guess {
        InitialGuess::Zero => (Field::zeros(grid), Field::zeros(grid)),
        InitialGuess::Provided { u, m } => {
            if !grid.same_shape(u.grid()) || !grid.same_shape(m.grid()) {
                return Err(Error::ShapeMismatch("initial guess does not live on the problem grid".into()));
            }
            (u.clone(), m.clone())
        }
    };
    let mut history = Vec::new();
    let mut best: Option<(f64, Field, Field)> = None;
    let mut converged = false;
    for it in 0..opts.max_outer_iters {
        let theta = if it == 0 { 1.0 } else { opts.theta };
        let u_new = hjb_march(&m, prob, u_t, &ops, opts.linear_tol)?;
        u = blend(theta, &u_new, &u);
        let m_new = fp_march(&u, prob, m_0, &ops, opts.linear_tol)?;
        m = blend(theta, &m_new, &m);
        let (ru, rm) = residual_norms(&u, &m, prob)?;
        if !ru.is_finite() || !rm.is_finite() {
            return Err(Error::NonFinite("Picard residual".into()));
        }
        history.push((ru, rm));
        let combined = ru.max(rm);
        if best.as_ref().is_none_or(|b| combined < b.0) {
            best = Some((combined, u.clone(), m.clone()));
        }
        if combined <= opts.tol_res {
            converged = true;
            break;
        }
    }
    let (_, u, m) = best.expect("at least one iteration");
    let admissibility = AdmissibleSetCheck::measure(&u, &m, &prob.bounds);
    let report = SolveReport {
        iterations: history.len(),
        residual_history: history,
        converged,
        admissibility,
    };
    Ok((u, m, report))
}
