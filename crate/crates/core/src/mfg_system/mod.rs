//! The generalized second-order mean field games system
//!
//! ```text
//! u_t + βΔu − r(x)|∇u|²/2 + F(∫_Ω M(x,y) m(y,t) dy, m) = G₁
//! m_t − βΔm − div(r(x) m ∇u)                          = G₂
//! ∂_ν u = ∂_ν m = 0 on ∂Ω × (0, T)
//! ```
//!
//! with pointwise residual evaluation, the implicit-Euler scheme residuals the
//! forward solver drives to zero, and manufactured exact solutions.

mod interaction;
mod manufactured;

pub use interaction::{interaction_value, Coupling, InteractionOperator, InteractionSpec, Kernel};
pub use manufactured::{manufactured_problem, ClosedForm, CosineMode, Jet, ManufacturedProblem, TimeProfile};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid, SpatialField};
use crate::sparse::CsrMatrix;

/// Elasticity coefficient `r(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Elasticity {
    Constant { value: f64 },
    /// `base + amplitude · Π_a cos(k π (x_a − lo_a) / L_a)`.
    Cosine { base: f64, amplitude: f64, wavenumber: f64 },
}

impl Default for Elasticity {
    fn default() -> Self {
        Elasticity::Constant { value: 0.0 }
    }
}

impl Elasticity {
    /// Value and gradient at `x`.
    pub fn eval(&self, grid: &Grid, x: &[f64]) -> (f64, [f64; 2]) {
        match *self {
            Elasticity::Constant { value } => (value, [0.0; 2]),
            Elasticity::Cosine { base, amplitude, wavenumber } => {
                let axes = grid.axes();
                let mut c = [1.0; 2];
                let mut dc = [0.0; 2];
                for (a, ax) in axes.iter().enumerate() {
                    let w = wavenumber * std::f64::consts::PI / ax.length();
                    c[a] = (w * (x[a] - ax.lo)).cos();
                    dc[a] = -w * (w * (x[a] - ax.lo)).sin();
                }
                let prod: f64 = c[..axes.len()].iter().product();
                let mut grad = [0.0; 2];
                for a in 0..axes.len() {
                    let others: f64 = (0..axes.len()).filter(|&b| b != a).map(|b| c[b]).product();
                    grad[a] = amplitude * dc[a] * others;
                }
                (base + amplitude * prod, grad)
            }
        }
    }

    pub fn sample(&self, grid: &Grid) -> SpatialField {
        SpatialField::from_fn(*grid, |x| self.eval(grid, x).0)
    }
}

/// A-priori bounds `D₁ … D₄`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self { d1: 10.0, d2: 10.0, d3: 10.0, d4: 10.0 }
    }
}

impl Bounds {
    /// `D = max(D₁, D₂, D₃, D₄)`.
    pub fn max(&self) -> f64 {
        self.d1.max(self.d2).max(self.d3).max(self.d4)
    }
}

/// Coefficients and right-hand sides of one MFG system on a grid.
#[derive(Clone, Debug)]
pub struct MfgProblem {
    pub grid: Grid,
    pub beta: f64,
    pub elasticity: Elasticity,
    pub interaction: InteractionSpec,
    pub g1: Field,
    pub g2: Field,
    pub bounds: Bounds,
    r: SpatialField,
    op: InteractionOperator,
}

impl MfgProblem {
    pub fn new(
        grid: Grid,
        beta: f64,
        elasticity: Elasticity,
        interaction: InteractionSpec,
        g1: Field,
        g2: Field,
        bounds: Bounds,
    ) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
        }
        if !grid.same_shape(g1.grid()) || !grid.same_shape(g2.grid()) {
            return Err(Error::ShapeMismatch("sources must live on the problem grid".into()));
        }
        if g1.values().iter().chain(g2.values()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("source terms".into()));
        }
        interaction.kernel.validate()?;
        for (name, d) in [("D1", bounds.d1), ("D2", bounds.d2), ("D3", bounds.d3), ("D4", bounds.d4)] {
            if !(d > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {d}")));
            }
        }
        let lip = interaction.coupling.derivative_bound();
        if lip > bounds.d1 {
            return Err(Error::InvalidParameter(format!(
                "coupling derivative bound {lip} exceeds D1 = {}",
                bounds.d1
            )));
        }
        let r = elasticity.sample(&grid);
        let r_c1 = (0..grid.spatial_len())
            .map(|s| {
                let x = grid.spatial_coords(s);
                let (v, g) = elasticity.eval(&grid, &x[..grid.dim()]);
                v.abs().max(g[0].abs()).max(g[1].abs())
            })
            .fold(0.0, f64::max);
        let m_sup = interaction.kernel.sup_abs();
        if r_c1 > bounds.d2 || m_sup > bounds.d2 {
            return Err(Error::InvalidParameter(format!(
                "‖r‖_C1 = {r_c1} or sup|M| = {m_sup} exceeds D2 = {}",
                bounds.d2
            )));
        }
        let op = InteractionOperator::new(&grid, &interaction.kernel);
        Ok(Self {
            grid,
            beta,
            elasticity,
            interaction,
            g1,
            g2,
            bounds,
            r,
            op,
        })
    }

    /// Same coefficients with zero sources.
    pub fn homogeneous(grid: Grid, beta: f64, elasticity: Elasticity, interaction: InteractionSpec, bounds: Bounds) -> Result<Self> {
        Self::new(grid, beta, elasticity, interaction, Field::zeros(grid), Field::zeros(grid), bounds)
    }

    /// Replaces the sources so that `(u, m)` solves the discrete system exactly.
    pub fn with_discrete_sources(&self, u: &Field, m: &Field) -> Result<Self> {
        let mut p = self.clone();
        p.g1 = Field::zeros(self.grid);
        p.g2 = Field::zeros(self.grid);
        let g1 = residual_u(u, m, &p)?;
        let g2 = residual_m(u, m, &p)?;
        p.g1 = g1;
        p.g2 = g2;
        Ok(p)
    }

    pub fn with_sources(&self, g1: Field, g2: Field) -> Result<Self> {
        Self::new(self.grid, self.beta, self.elasticity.clone(), self.interaction.clone(), g1, g2, self.bounds)
    }

    /// `r` sampled on the spatial nodes.
    pub fn r(&self) -> &SpatialField {
        &self.r
    }

    pub fn interaction_operator(&self) -> &InteractionOperator {
        &self.op
    }

    /// `F(I[m], m)` on the grid.
    pub fn interaction_field(&self, m: &Field) -> Field {
        interaction::interaction_with(m, &self.op, &self.interaction.coupling)
    }
}

/// Sup-norm measurements of a pair and membership in `K₃(D₃) × K₄(D₄)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleSetCheck {
    pub sup_u: f64,
    pub sup_grad_u: f64,
    pub sup_laplacian_u: f64,
    pub sup_m: f64,
    pub sup_grad_m: f64,
    pub in_k3: bool,
    pub in_k4: bool,
}

fn sup_gradient(f: &Field) -> f64 {
    let grads = f.gradient();
    (0..f.values().len())
        .map(|k| grads.iter().map(|g| g.values()[k].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

impl AdmissibleSetCheck {
    pub fn measure(u: &Field, m: &Field, bounds: &Bounds) -> Self {
        let sup_u = u.sup_abs();
        let sup_grad_u = sup_gradient(u);
        let sup_laplacian_u = u.laplacian().sup_abs();
        let sup_m = m.sup_abs();
        let sup_grad_m = sup_gradient(m);
        Self {
            sup_u,
            sup_grad_u,
            sup_laplacian_u,
            sup_m,
            sup_grad_m,
            in_k3: sup_u <= bounds.d3 && sup_grad_u <= bounds.d3 && sup_laplacian_u <= bounds.d3,
            in_k4: sup_m <= bounds.d4 && sup_grad_m <= bounds.d4,
        }
    }

    pub fn admissible(&self) -> bool {
        self.in_k3 && self.in_k4
    }
}

/// Visits every face between neighbouring spatial nodes.
///
/// Calls `f(left, right, h, left_scale, right_scale)`; the scales are `1/h`
/// inside and `2/h` on boundary nodes (half control volumes).
pub(crate) fn for_each_face(grid: &Grid, mut f: impl FnMut(usize, usize, f64, f64, f64)) {
    let ns = grid.spatial_len();
    for (a, ax) in grid.axes().iter().enumerate() {
        let stride = if a == 0 { 1 } else { grid.axis(0).nodes };
        let h = ax.spacing();
        let n = ax.nodes;
        for s in 0..ns {
            let i = grid.spatial_multi_index(s)[a];
            if i + 1 >= n {
                continue;
            }
            let left_scale = if i == 0 { 2.0 / h } else { 1.0 / h };
            let right_scale = if i + 2 == n { 2.0 / h } else { 1.0 / h };
            f(s, s + stride, h, left_scale, right_scale);
        }
    }
}

/// Conservative `div(r m ∇u)` on one slice with zero boundary flux.
pub fn flux_divergence(grid: &Grid, r: &[f64], m: &[f64], u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grid.spatial_len()];
    for_each_face(grid, |l, rr, h, ls, rs| {
        let flux = 0.5 * (r[l] + r[rr]) * 0.5 * (m[l] + m[rr]) * (u[rr] - u[l]) / h;
        out[l] += ls * flux;
        out[rr] -= rs * flux;
    });
    out
}

/// Matrix of `m ↦ div(r m ∇u)` for fixed `u` on one slice.
pub fn flux_matrix_in_m(grid: &Grid, r: &[f64], u: &[f64]) -> CsrMatrix {
    let mut t = Vec::new();
    for_each_face(grid, |l, rr, h, ls, rs| {
        let c = 0.5 * (r[l] + r[rr]) * 0.5 * (u[rr] - u[l]) / h;
        t.push((l, l, ls * c));
        t.push((l, rr, ls * c));
        t.push((rr, l, -rs * c));
        t.push((rr, rr, -rs * c));
    });
    CsrMatrix::from_triplets(grid.spatial_len(), grid.spatial_len(), t)
}

/// Matrix of `u ↦ div(r m ∇u)` for fixed `m` on one slice.
pub fn flux_matrix_in_u(grid: &Grid, r: &[f64], m: &[f64]) -> CsrMatrix {
    let mut t = Vec::new();
    for_each_face(grid, |l, rr, h, ls, rs| {
        let c = 0.5 * (r[l] + r[rr]) * 0.5 * (m[l] + m[rr]) / h;
        t.push((l, rr, ls * c));
        t.push((l, l, -ls * c));
        t.push((rr, rr, -rs * c));
        t.push((rr, l, rs * c));
    });
    CsrMatrix::from_triplets(grid.spatial_len(), grid.spatial_len(), t)
}

/// `Σ_a (∂_a u)²` on a field.
pub(crate) fn grad_sq(u: &Field) -> Field {
    let grads = u.gradient();
    let mut out = Field::zeros(*u.grid());
    for g in &grads {
        for (o, v) in out.values_mut().iter_mut().zip(g.values()) {
            *o += v * v;
        }
    }
    out
}

fn check_pair(u: &Field, m: &Field, prob: &MfgProblem) -> Result<()> {
    u.check_same(m)?;
    if !prob.grid.same_shape(u.grid()) {
        return Err(Error::ShapeMismatch("fields and problem live on different grids".into()));
    }
    Ok(())
}

/// `u_t + βΔu − r|∇u|²/2 + F(I[m], m) − G₁` at every node.
pub fn residual_u(u: &Field, m: &Field, prob: &MfgProblem) -> Result<Field> {
    check_pair(u, m, prob)?;
    let ns = prob.grid.spatial_len();
    let ut = u.d_t();
    let lap = u.laplacian();
    let g2 = grad_sq(u);
    let inter = prob.interaction_field(m);
    let r = prob.r().values();
    let mut out = Vec::with_capacity(u.values().len());
    for k in 0..u.values().len() {
        out.push(
            ut.values()[k] + prob.beta * lap.values()[k] - 0.5 * r[k % ns] * g2.values()[k] + inter.values()[k]
                - prob.g1.values()[k],
        );
    }
    Field::new(prob.grid, out)
}

/// `m_t − βΔm − div(r m ∇u) − G₂` at every node, divergence in flux form.
pub fn residual_m(u: &Field, m: &Field, prob: &MfgProblem) -> Result<Field> {
    check_pair(u, m, prob)?;
    let grid = prob.grid;
    let mt = m.d_t();
    let lap = m.laplacian();
    let r = prob.r().values();
    let mut out = Vec::with_capacity(grid.len());
    for n in 0..grid.time_len() {
        let div = flux_divergence(&grid, r, m.slice(n), u.slice(n));
        let base = n * grid.spatial_len();
        for (s, d) in div.iter().enumerate() {
            let k = base + s;
            out.push(mt.values()[k] - prob.beta * lap.values()[k] - d - prob.g2.values()[k]);
        }
    }
    Field::new(grid, out)
}

/// Residuals of the implicit-Euler equations the forward solver marches.
///
/// HJB at level `n < N`:
/// `(uⁿ⁺¹ − uⁿ)/Δt + βΔuⁿ − r|∇uⁿ⁺¹|²/2 + F(I[mⁿ], mⁿ) − G₁ⁿ` (zero at `n = N`);
/// FP at level `n ≥ 1`:
/// `(mⁿ − mⁿ⁻¹)/Δt − βΔmⁿ − div(r mⁿ ∇uⁿ) − G₂ⁿ` (zero at `n = 0`).
pub fn scheme_residuals(u: &Field, m: &Field, prob: &MfgProblem) -> Result<(Field, Field)> {
    check_pair(u, m, prob)?;
    let grid = prob.grid;
    let ns = grid.spatial_len();
    let nt = grid.time_len();
    let dt = grid.dt();
    let lap_u = u.laplacian();
    let lap_m = m.laplacian();
    let gsq = grad_sq(u);
    let inter = prob.interaction_field(m);
    let r = prob.r().values();
    let mut ru = vec![0.0; grid.len()];
    let mut rm = vec![0.0; grid.len()];
    for n in 0..nt {
        let base = n * ns;
        if n + 1 < nt {
            let up = base + ns;
            for s in 0..ns {
                let k = base + s;
                ru[k] = (u.values()[up + s] - u.values()[k]) / dt + prob.beta * lap_u.values()[k]
                    - 0.5 * r[s] * gsq.values()[up + s]
                    + inter.values()[k]
                    - prob.g1.values()[k];
            }
        }
        if n > 0 {
            let div = flux_divergence(&grid, r, m.slice(n), u.slice(n));
            let down = base - ns;
            for s in 0..ns {
                let k = base + s;
                rm[k] = (m.values()[k] - m.values()[down + s]) / dt
                    - prob.beta * lap_m.values()[k]
                    - div[s]
                    - prob.g2.values()[k];
            }
        }
    }
    Ok((Field::new(grid, ru)?, Field::new(grid, rm)?))
}
