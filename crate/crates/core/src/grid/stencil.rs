//! Finite-difference stencils and their application along tensor axes.
//!
//! Spatial stencils use a mirror ghost layer (`u[-1] = u[1]`), so the first
//! derivative vanishes identically on `∂Ω` and the second derivative there is
//! `2 (u[1] - u[0]) / h²`. Time stencils are central inside and one-sided
//! second order at both ends.

use super::{Field, Grid, SpatialField};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// One-dimensional linear operator stored row by row.
#[derive(Clone, Debug)]
pub(crate) struct Stencil {
    pub n_in: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl Stencil {
    pub fn n_out(&self) -> usize {
        self.rows.len()
    }

    /// Central first difference with mirror ghosts.
    pub fn first_mirror(n: usize, h: f64) -> Self {
        let c = 0.5 / h;
        let rows = (0..n)
            .map(|i| {
                if i == 0 || i + 1 == n {
                    Vec::new()
                } else {
                    vec![(i - 1, -c), (i + 1, c)]
                }
            })
            .collect();
        Self { n_in: n, rows }
    }

    /// Second difference with mirror ghosts.
    pub fn second_mirror(n: usize, h: f64) -> Self {
        let c = 1.0 / (h * h);
        let rows = (0..n)
            .map(|i| {
                if i == 0 {
                    vec![(0, -2.0 * c), (1, 2.0 * c)]
                } else if i + 1 == n {
                    vec![(n - 2, 2.0 * c), (n - 1, -2.0 * c)]
                } else {
                    vec![(i - 1, c), (i, -2.0 * c), (i + 1, c)]
                }
            })
            .collect();
        Self { n_in: n, rows }
    }

    /// First difference in time: central inside, one-sided second order at the ends.
    pub fn first_time(n: usize, dt: f64) -> Self {
        let c = 0.5 / dt;
        let rows = (0..n)
            .map(|i| {
                if i == 0 {
                    vec![(0, -3.0 * c), (1, 4.0 * c), (2, -c)]
                } else if i + 1 == n {
                    vec![(n - 3, c), (n - 2, -4.0 * c), (n - 1, 3.0 * c)]
                } else {
                    vec![(i - 1, -c), (i + 1, c)]
                }
            })
            .collect();
        Self { n_in: n, rows }
    }

    /// Second difference in time; one-sided four-point ends when `n >= 4`.
    pub fn second_time(n: usize, dt: f64) -> Self {
        let c = 1.0 / (dt * dt);
        let rows = (0..n)
            .map(|i| {
                if i == 0 {
                    if n >= 4 {
                        vec![(0, 2.0 * c), (1, -5.0 * c), (2, 4.0 * c), (3, -c)]
                    } else {
                        vec![(0, c), (1, -2.0 * c), (2, c)]
                    }
                } else if i + 1 == n {
                    if n >= 4 {
                        vec![(n - 4, -c), (n - 3, 4.0 * c), (n - 2, -5.0 * c), (n - 1, 2.0 * c)]
                    } else {
                        vec![(n - 3, c), (n - 2, -2.0 * c), (n - 1, c)]
                    }
                } else {
                    vec![(i - 1, c), (i, -2.0 * c), (i + 1, c)]
                }
            })
            .collect();
        Self { n_in: n, rows }
    }

    /// Applies the stencil along `axis` of a tensor with shape `dims`.
    pub fn apply(&self, values: &[f64], dims: &[usize], axis: usize) -> (Vec<f64>, Vec<usize>) {
        debug_assert_eq!(dims[axis], self.n_in);
        debug_assert_eq!(values.len(), dims.iter().product::<usize>());
        let inner: usize = dims[..axis].iter().product();
        let outer: usize = dims[axis + 1..].iter().product();
        let n_out = self.n_out();
        let mut out = vec![0.0; inner * n_out * outer];
        for o in 0..outer {
            for (r, row) in self.rows.iter().enumerate() {
                let dst = &mut out[(o * n_out + r) * inner..(o * n_out + r + 1) * inner];
                for &(col, c) in row {
                    let src = &values[(o * self.n_in + col) * inner..(o * self.n_in + col + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += c * s;
                    }
                }
            }
        }
        let mut out_dims = dims.to_vec();
        out_dims[axis] = n_out;
        (out, out_dims)
    }

    /// The stencil lifted to the full tensor as a sparse matrix.
    pub fn tensor_matrix(&self, dims: &[usize], axis: usize) -> CsrMatrix {
        let inner: usize = dims[..axis].iter().product();
        let outer: usize = dims[axis + 1..].iter().product();
        let n_out = self.n_out();
        let ncols = inner * self.n_in * outer;
        let mut triplets = Vec::new();
        for o in 0..outer {
            for (r, row) in self.rows.iter().enumerate() {
                for i in 0..inner {
                    let out_idx = (o * n_out + r) * inner + i;
                    for &(col, c) in row {
                        triplets.push((out_idx, (o * self.n_in + col) * inner + i, c));
                    }
                }
            }
        }
        CsrMatrix::from_triplets(inner * n_out * outer, ncols, triplets)
    }
}

/// Space-time derivative operators available on a [`Field`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Derivative {
    T,
    TT,
    X(usize),
    XX(usize),
    /// ∂²/∂x₀∂x₁ (2-d grids only).
    XY,
    TX(usize),
    Laplacian,
}

/// Spatial derivative operators available on a [`SpatialField`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpatialDerivative {
    X(usize),
    XX(usize),
    XY,
    Laplacian,
}

fn axis_stencil_space(grid: &Grid, d: usize, second: bool) -> Stencil {
    let a = grid.axis(d);
    if second {
        Stencil::second_mirror(a.nodes, a.spacing())
    } else {
        Stencil::first_mirror(a.nodes, a.spacing())
    }
}

fn check_axis(grid: &Grid, d: usize) -> Result<()> {
    if d < grid.dim() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("axis {d} on a {}-d grid", grid.dim())))
    }
}

fn check_derivative(grid: &Grid, d: Derivative) -> Result<()> {
    match d {
        Derivative::X(a) | Derivative::XX(a) | Derivative::TX(a) => check_axis(grid, a),
        Derivative::XY if grid.dim() < 2 => Err(Error::InvalidParameter("cross derivative on a 1-d grid".into())),
        _ => Ok(()),
    }
}

impl Grid {
    /// Sparse matrix of a derivative acting on the flattened field.
    pub fn derivative_matrix(&self, d: Derivative) -> Result<CsrMatrix> {
        check_derivative(self, d)?;
        let dims = self.tensor_dims();
        let t_axis = self.dim();
        Ok(match d {
            Derivative::T => Stencil::first_time(self.time_len(), self.dt()).tensor_matrix(&dims, t_axis),
            Derivative::TT => Stencil::second_time(self.time_len(), self.dt()).tensor_matrix(&dims, t_axis),
            Derivative::X(a) => axis_stencil_space(self, a, false).tensor_matrix(&dims, a),
            Derivative::XX(a) => axis_stencil_space(self, a, true).tensor_matrix(&dims, a),
            Derivative::XY => {
                let dx = axis_stencil_space(self, 0, false).tensor_matrix(&dims, 0);
                let dy = axis_stencil_space(self, 1, false).tensor_matrix(&dims, 1);
                dy.matmul(&dx)
            }
            Derivative::TX(a) => {
                let dx = axis_stencil_space(self, a, false).tensor_matrix(&dims, a);
                let dt = Stencil::first_time(self.time_len(), self.dt()).tensor_matrix(&dims, t_axis);
                dt.matmul(&dx)
            }
            Derivative::Laplacian => {
                let mut lap = axis_stencil_space(self, 0, true).tensor_matrix(&dims, 0);
                for a in 1..self.dim() {
                    lap = lap.add(&axis_stencil_space(self, a, true).tensor_matrix(&dims, a));
                }
                lap
            }
        })
    }

    /// Sparse matrix of a spatial operator acting on one time slice.
    pub fn spatial_matrix(&self, d: SpatialDerivative) -> Result<CsrMatrix> {
        let dims = self.spatial_dims();
        Ok(match d {
            SpatialDerivative::X(a) => {
                check_axis(self, a)?;
                axis_stencil_space(self, a, false).tensor_matrix(&dims, a)
            }
            SpatialDerivative::XX(a) => {
                check_axis(self, a)?;
                axis_stencil_space(self, a, true).tensor_matrix(&dims, a)
            }
            SpatialDerivative::XY => {
                check_axis(self, 1)?;
                let dx = axis_stencil_space(self, 0, false).tensor_matrix(&dims, 0);
                axis_stencil_space(self, 1, false).tensor_matrix(&dims, 1).matmul(&dx)
            }
            SpatialDerivative::Laplacian => {
                let mut lap = axis_stencil_space(self, 0, true).tensor_matrix(&dims, 0);
                for a in 1..self.dim() {
                    lap = lap.add(&axis_stencil_space(self, a, true).tensor_matrix(&dims, a));
                }
                lap
            }
        })
    }
}

impl Field {
    /// Applies a finite-difference derivative.
    pub fn derivative(&self, d: Derivative) -> Result<Field> {
        let grid = *self.grid();
        check_derivative(&grid, d)?;
        let dims = grid.tensor_dims();
        let t_axis = grid.dim();
        let time1 = || Stencil::first_time(grid.time_len(), grid.dt());
        let values = match d {
            Derivative::T => time1().apply(self.values(), &dims, t_axis).0,
            Derivative::TT => Stencil::second_time(grid.time_len(), grid.dt())
                .apply(self.values(), &dims, t_axis)
                .0,
            Derivative::X(a) => axis_stencil_space(&grid, a, false).apply(self.values(), &dims, a).0,
            Derivative::XX(a) => axis_stencil_space(&grid, a, true).apply(self.values(), &dims, a).0,
            Derivative::XY => {
                let (dx, _) = axis_stencil_space(&grid, 0, false).apply(self.values(), &dims, 0);
                axis_stencil_space(&grid, 1, false).apply(&dx, &dims, 1).0
            }
            Derivative::TX(a) => {
                let (dx, _) = axis_stencil_space(&grid, a, false).apply(self.values(), &dims, a);
                time1().apply(&dx, &dims, t_axis).0
            }
            Derivative::Laplacian => laplacian_values(&grid, self.values(), &dims),
        };
        Ok(Field::from_raw(grid, values))
    }

    /// Spatial gradient components.
    pub fn gradient(&self) -> Vec<Field> {
        (0..self.grid().dim())
            .map(|a| self.derivative(Derivative::X(a)).expect("axis in range"))
            .collect()
    }

    pub fn laplacian(&self) -> Field {
        self.derivative(Derivative::Laplacian).expect("laplacian is always defined")
    }

    pub fn d_t(&self) -> Field {
        self.derivative(Derivative::T).expect("time derivative is always defined")
    }

    /// One-sided second-order estimate of the outward normal derivative,
    /// maximised over `∂Ω × [t0, t1]` and divided by `max(1, sup|∇u|)`.
    ///
    /// The mirror-ghost derivative is zero by construction; this estimate is
    /// what reveals samples of functions that are not Neumann-compatible.
    pub fn neumann_defect(&self) -> f64 {
        (0..self.grid().time_len())
            .map(|n| self.trace(n).neumann_defect())
            .fold(0.0, f64::max)
    }
}

fn laplacian_values(grid: &Grid, values: &[f64], dims: &[usize]) -> Vec<f64> {
    let mut acc = axis_stencil_space(grid, 0, true).apply(values, dims, 0).0;
    for a in 1..grid.dim() {
        let (d2, _) = axis_stencil_space(grid, a, true).apply(values, dims, a);
        for (x, y) in acc.iter_mut().zip(d2) {
            *x += y;
        }
    }
    acc
}

impl SpatialField {
    pub fn derivative(&self, d: SpatialDerivative) -> Result<SpatialField> {
        let grid = *self.grid();
        let dims = grid.spatial_dims();
        let values = match d {
            SpatialDerivative::X(a) => {
                check_axis(&grid, a)?;
                axis_stencil_space(&grid, a, false).apply(self.values(), &dims, a).0
            }
            SpatialDerivative::XX(a) => {
                check_axis(&grid, a)?;
                axis_stencil_space(&grid, a, true).apply(self.values(), &dims, a).0
            }
            SpatialDerivative::XY => {
                check_axis(&grid, 1)?;
                let (dx, _) = axis_stencil_space(&grid, 0, false).apply(self.values(), &dims, 0);
                axis_stencil_space(&grid, 1, false).apply(&dx, &dims, 1).0
            }
            SpatialDerivative::Laplacian => laplacian_values(&grid, self.values(), &dims),
        };
        SpatialField::new(grid, values)
    }

    pub fn gradient(&self) -> Vec<SpatialField> {
        (0..self.grid().dim())
            .map(|a| self.derivative(SpatialDerivative::X(a)).expect("axis in range"))
            .collect()
    }

    pub fn laplacian(&self) -> SpatialField {
        self.derivative(SpatialDerivative::Laplacian).expect("laplacian is always defined")
    }

    /// See [`Field::neumann_defect`].
    pub fn neumann_defect(&self) -> f64 {
        let grid = *self.grid();
        let scale = self
            .gradient()
            .iter()
            .map(SpatialField::sup_abs)
            .fold(1.0, f64::max);
        let mut worst: f64 = 0.0;
        for s in 0..grid.spatial_len() {
            let idx = grid.spatial_multi_index(s);
            for (a, ax) in grid.axes().iter().enumerate() {
                let stride = if a == 0 { 1 } else { grid.axis(0).nodes };
                let h = ax.spacing();
                let v = |k: isize| self.values()[(s as isize + k * stride as isize) as usize];
                if idx[a] == 0 {
                    worst = worst.max(((-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h)).abs());
                } else if idx[a] + 1 == ax.nodes {
                    worst = worst.max(((3.0 * v(0) - 4.0 * v(-1) + v(-2)) / (2.0 * h)).abs());
                }
            }
        }
        worst / scale
    }
}

/// Every derivative the stability norms and residuals need, computed once.
#[derive(Clone, Debug)]
pub struct DiffOps {
    pub d_t: Field,
    pub gradient: Vec<Field>,
    pub laplacian: Field,
    /// `second[i][j]` = ∂²u/∂xᵢ∂xⱼ (symmetric).
    pub second: Vec<Vec<Field>>,
}

impl DiffOps {
    pub fn new(u: &Field) -> Self {
        let dim = u.grid().dim();
        let mut second = vec![Vec::with_capacity(dim); dim];
        for (i, row) in second.iter_mut().enumerate() {
            for j in 0..dim {
                let d = if i == j { Derivative::XX(i) } else { Derivative::XY };
                row.push(u.derivative(d).expect("valid axes"));
            }
        }
        Self {
            d_t: u.d_t(),
            gradient: u.gradient(),
            laplacian: u.laplacian(),
            second,
        }
    }
}
