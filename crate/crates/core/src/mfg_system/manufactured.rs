//! Closed-form exact pairs and the sources that make them solve the system.

use serde::{Deserialize, Serialize};

use super::{Bounds, Elasticity, InteractionSpec, Kernel, MfgProblem};
use crate::error::{Error, Result};
use crate::grid::{Field, Grid, SpatialField};

/// Scalar time factor of one cosine mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeProfile {
    Constant,
    /// `e^{rate·t}`.
    Exp { rate: f64 },
    /// `cos(omega·t + phase)`.
    Cos { omega: f64, phase: f64 },
}

impl TimeProfile {
    /// Value and derivative at `t`.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        match *self {
            TimeProfile::Constant => (1.0, 0.0),
            TimeProfile::Exp { rate } => {
                let e = (rate * t).exp();
                (e, rate * e)
            }
            TimeProfile::Cos { omega, phase } => {
                let a = omega * t + phase;
                (a.cos(), -omega * a.sin())
            }
        }
    }
}

/// `amplitude · profile(t) · Π_a cos(k_a π (x_a − lo_a)/L_a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineMode {
    pub amplitude: f64,
    pub wavenumbers: [f64; 2],
    pub profile: TimeProfile,
}

/// `offset + Σ modes`, evaluated analytically with its derivatives.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedForm {
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub modes: Vec<CosineMode>,
}

/// Point values of a closed form and the derivatives the system needs.
#[derive(Clone, Copy, Debug, Default)]
pub struct Jet {
    pub value: f64,
    pub d_t: f64,
    pub grad: [f64; 2],
    pub laplacian: f64,
}

impl ClosedForm {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self { offset: c, modes: Vec::new() }
    }

    /// `offset + amplitude · profile(t) · cos(kπx)` (times `cos(kπy)` in 2D when `both_axes`).
    pub fn single(offset: f64, amplitude: f64, k: f64, both_axes: bool, profile: TimeProfile) -> Self {
        Self {
            offset,
            modes: vec![CosineMode {
                amplitude,
                wavenumbers: [k, if both_axes { k } else { 0.0 }],
                profile,
            }],
        }
    }

    pub fn jet(&self, grid: &Grid, x: &[f64], t: f64) -> Jet {
        let axes = grid.axes();
        let mut jet = Jet { value: self.offset, ..Jet::default() };
        for mode in &self.modes {
            let (p, dp) = mode.profile.eval(t);
            let mut c = [1.0; 2];
            let mut s = [0.0; 2];
            let mut w = [0.0; 2];
            for (a, ax) in axes.iter().enumerate() {
                w[a] = mode.wavenumbers[a] * std::f64::consts::PI / ax.length();
                let arg = w[a] * (x[a] - ax.lo);
                c[a] = arg.cos();
                s[a] = arg.sin();
            }
            let prod: f64 = c[..axes.len()].iter().product();
            let amp = mode.amplitude;
            jet.value += amp * p * prod;
            jet.d_t += amp * dp * prod;
            for a in 0..axes.len() {
                let others: f64 = (0..axes.len()).filter(|&b| b != a).map(|b| c[b]).product();
                jet.grad[a] += -amp * p * w[a] * s[a] * others;
                jet.laplacian += -amp * p * w[a] * w[a] * prod;
            }
        }
        jet
    }

    pub fn sample(&self, grid: &Grid) -> Field {
        Field::from_fn(*grid, |x, t| self.jet(grid, x, t).value)
    }

    pub fn trace(&self, grid: &Grid, t: f64) -> SpatialField {
        SpatialField::from_fn(*grid, |x| self.jet(grid, x, t).value)
    }

    /// Largest `|∂_ν|` over boundary nodes and all time levels.
    pub fn neumann_defect(&self, grid: &Grid) -> f64 {
        let mut worst = 0.0f64;
        for n in 0..grid.time_len() {
            let t = grid.time(n);
            for s in 0..grid.spatial_len() {
                if !grid.is_boundary(s) {
                    continue;
                }
                let x = grid.spatial_coords(s);
                let idx = grid.spatial_multi_index(s);
                let jet = self.jet(grid, &x[..grid.dim()], t);
                for (a, ax) in grid.axes().iter().enumerate() {
                    if idx[a] == 0 || idx[a] + 1 == ax.nodes {
                        worst = worst.max(jet.grad[a].abs());
                    }
                }
            }
        }
        worst
    }

    /// Spatial factors of `∫_Ω M(x, y) f(y, t) dy` at every node, one entry
    /// for the offset and one per mode, by fine composite Simpson per axis.
    fn nonlocal_table(&self, kernel: &Kernel, grid: &Grid) -> Vec<Vec<f64>> {
        let axes = grid.axes();
        let mut waves = vec![[0.0; 2]];
        waves.extend(self.modes.iter().map(|m| m.wavenumbers));
        // per axis, per node index, per wave entry
        let per_axis: Vec<Vec<Vec<f64>>> = axes
            .iter()
            .enumerate()
            .map(|(a, ax)| {
                (0..ax.nodes)
                    .map(|i| {
                        let x = ax.coord(i);
                        waves
                            .iter()
                            .map(|k| {
                                let w = k[a] * std::f64::consts::PI / ax.length();
                                simpson(ax.lo, ax.hi, FINE_PANELS, |y| kernel.factor(x, y) * (w * (y - ax.lo)).cos())
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        (0..grid.spatial_len())
            .map(|s| {
                let idx = grid.spatial_multi_index(s);
                (0..waves.len())
                    .map(|j| (0..axes.len()).map(|a| per_axis[a][idx[a]][j]).product::<f64>() * kernel.amplitude())
                    .collect()
            })
            .collect()
    }

    fn nonlocal_average(&self, table_row: &[f64], t: f64) -> f64 {
        let mut total = self.offset * table_row[0];
        for (mode, f) in self.modes.iter().zip(&table_row[1..]) {
            total += mode.amplitude * mode.profile.eval(t).0 * f;
        }
        total
    }
}

const FINE_PANELS: usize = 2048;

fn simpson(a: f64, b: f64, panels: usize, f: impl Fn(f64) -> f64) -> f64 {
    let n = panels + panels % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// A problem with an exact solution and the traces that pose it.
#[derive(Clone, Debug)]
pub struct ManufacturedProblem {
    pub problem: MfgProblem,
    pub u: Field,
    pub m: Field,
    pub u_star: ClosedForm,
    pub m_star: ClosedForm,
}

impl ManufacturedProblem {
    pub fn u_terminal(&self) -> SpatialField {
        self.u.trace(self.u.grid().time_len() - 1)
    }

    pub fn m_terminal(&self) -> SpatialField {
        self.m.trace(self.m.grid().time_len() - 1)
    }

    pub fn u_initial(&self) -> SpatialField {
        self.u.trace(0)
    }

    pub fn m_initial(&self) -> SpatialField {
        self.m.trace(0)
    }
}

const NEUMANN_TOL: f64 = 1e-10;

/// Builds `G₁, G₂` from the exact left-hand sides of the system at `(u*, m*)`.
///
/// Derivatives are analytic; the nonlocal average uses fine Simpson
/// quadrature, so the pair solves the continuous system up to that error.
pub fn manufactured_problem(
    grid: Grid,
    u_star: &ClosedForm,
    m_star: &ClosedForm,
    beta: f64,
    elasticity: Elasticity,
    interaction: InteractionSpec,
    bounds: Bounds,
) -> Result<ManufacturedProblem> {
    for (name, f) in [("u*", u_star), ("m*", m_star)] {
        let defect = f.neumann_defect(&grid);
        if defect > NEUMANN_TOL {
            return Err(Error::Neumann(format!(
                "{name} has normal derivative {defect:.3e} on the boundary"
            )));
        }
    }
    let mut g1 = Vec::with_capacity(grid.len());
    let mut g2 = Vec::with_capacity(grid.len());
    let dim = grid.dim();
    let table = if matches!(interaction.kernel, Kernel::Zero) {
        vec![vec![0.0; m_star.modes.len() + 1]; grid.spatial_len()]
    } else {
        m_star.nonlocal_table(&interaction.kernel, &grid)
    };
    for n in 0..grid.time_len() {
        let t = grid.time(n);
        for s in 0..grid.spatial_len() {
            let xs = grid.spatial_coords(s);
            let x = &xs[..dim];
            let u = u_star.jet(&grid, x, t);
            let m = m_star.jet(&grid, x, t);
            let (r, grad_r) = elasticity.eval(&grid, x);
            let grad_u_sq: f64 = u.grad[..dim].iter().map(|g| g * g).sum();
            let avg = m_star.nonlocal_average(&table[s], t);
            let f = interaction.coupling.value(avg, m.value);
            g1.push(u.d_t + beta * u.laplacian - 0.5 * r * grad_u_sq + f);
            // div(r m ∇u) = m ∇r·∇u + r ∇m·∇u + r m Δu
            let mut div = r * m.value * u.laplacian;
            for a in 0..dim {
                div += (m.value * grad_r[a] + r * m.grad[a]) * u.grad[a];
            }
            g2.push(m.d_t - beta * m.laplacian - div);
        }
    }
    let problem = MfgProblem::new(
        grid,
        beta,
        elasticity,
        interaction,
        Field::new(grid, g1)?,
        Field::new(grid, g2)?,
        bounds,
    )?;
    Ok(ManufacturedProblem {
        problem,
        u: u_star.sample(&grid),
        m: m_star.sample(&grid),
        u_star: u_star.clone(),
        m_star: m_star.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::{residual_m, residual_u, Coupling};
    use super::*;
    use crate::grid::{norm, NormKind, Region};
    use std::f64::consts::PI;

    fn grid1(n: usize, nt: usize) -> Grid {
        Grid::new(&[(0.0, 1.0)], &[n], 1.0, nt).unwrap()
    }

    fn decay() -> TimeProfile {
        TimeProfile::Exp { rate: -1.0 }
    }

    fn tanh_interaction() -> InteractionSpec {
        InteractionSpec {
            kernel: Kernel::Gaussian { sigma: 0.3, amplitude: 1.0 },
            coupling: Coupling::Tanh { gamma_y: 0.5, gamma_z: 0.5 },
        }
    }

    #[test]
    fn zero_pair_has_zero_sources() {
        let g = grid1(9, 9);
        let mp = manufactured_problem(
            g,
            &ClosedForm::zero(),
            &ClosedForm::zero(),
            0.1,
            Elasticity::Constant { value: 1.0 },
            tanh_interaction(),
            Bounds::default(),
        )
        .unwrap();
        assert_eq!(mp.problem.g1.sup_abs(), 0.0);
        assert_eq!(mp.problem.g2.sup_abs(), 0.0);
    }

    #[test]
    fn heat_like_source_matches_symbolic_substitution() {
        let g = grid1(17, 9);
        let u = ClosedForm::single(0.0, 1.0, 1.0, false, decay());
        let mp = manufactured_problem(
            g,
            &u,
            &ClosedForm::constant(1.0),
            0.1,
            Elasticity::default(),
            InteractionSpec::default(),
            Bounds::default(),
        )
        .unwrap();
        let oracle = Field::from_fn(g, |x, t| (-1.0 - 0.1 * PI * PI) * (-t).exp() * (PI * x[0]).cos());
        for (a, b) in mp.problem.g1.values().iter().zip(oracle.values()) {
            assert!((a - b).abs() < 1e-13);
        }
        assert!(mp.problem.g2.sup_abs() < 1e-15);
    }

    #[test]
    fn non_neumann_pairs_are_rejected() {
        let g = grid1(9, 5);
        let bad = ClosedForm::single(0.0, 1.0, 0.5, false, TimeProfile::Constant);
        let res = manufactured_problem(
            g,
            &bad,
            &ClosedForm::constant(1.0),
            0.1,
            Elasticity::default(),
            InteractionSpec::default(),
            Bounds::default(),
        );
        assert!(matches!(res, Err(Error::Neumann(_))));
    }

    fn nonlinear(n: usize, nt: usize) -> ManufacturedProblem {
        manufactured_problem(
            grid1(n, nt),
            &ClosedForm::single(0.0, 1.0, 1.0, false, decay()),
            &ClosedForm::single(1.0, 0.5, 1.0, false, decay()),
            0.1,
            Elasticity::Constant { value: 1.0 },
            tanh_interaction(),
            Bounds::default(),
        )
        .unwrap()
    }

    #[test]
    fn nonlinear_residuals_small_on_fine_grid() {
        let mp = nonlinear(129, 257);
        let l2 = |f: Field| norm(&f, NormKind::L2Q, Region::Full).unwrap();
        let ru = l2(residual_u(&mp.u, &mp.m, &mp.problem).unwrap());
        let rm = l2(residual_m(&mp.u, &mp.m, &mp.problem).unwrap());
        assert!(ru < 1e-3 && rm < 1e-3, "{ru} {rm}");
    }

    #[test]
    fn residuals_converge_at_second_order() {
        let mut eu = Vec::new();
        let mut em = Vec::new();
        for (n, nt) in [(17, 17), (33, 33), (65, 65)] {
            let mp = nonlinear(n, nt);
            eu.push(residual_u(&mp.u, &mp.m, &mp.problem).unwrap().sup_abs());
            em.push(residual_m(&mp.u, &mp.m, &mp.problem).unwrap().sup_abs());
        }
        for e in [&eu, &em] {
            let slope = (e[1] / e[2]).log2();
            assert!(slope > 1.8, "{e:?}");
        }
    }

    #[test]
    fn two_dimensional_cosine_elasticity() {
        let mut errs = Vec::new();
        for n in [9, 17, 33] {
            let g = Grid::new(&[(0.0, 1.0), (0.0, 2.0)], &[n, n], 0.5, n).unwrap();
            let mp = manufactured_problem(
                g,
                &ClosedForm::single(0.0, 0.8, 1.0, true, decay()),
                &ClosedForm::single(1.0, 0.3, 1.0, true, TimeProfile::Cos { omega: 1.0, phase: 0.2 }),
                0.2,
                Elasticity::Cosine { base: 1.0, amplitude: 0.2, wavenumber: 1.0 },
                tanh_interaction(),
                Bounds::default(),
            )
            .unwrap();
            let ru = residual_u(&mp.u, &mp.m, &mp.problem).unwrap().sup_abs();
            let rm = residual_m(&mp.u, &mp.m, &mp.problem).unwrap().sup_abs();
            errs.push(ru.max(rm));
        }
        assert!((errs[1] / errs[2]).log2() > 1.7, "{errs:?}");
    }
}
