//! Cosine (DCT-I) representations of Neumann-compatible grid functions.
//!
//! On `n` equispaced nodes every sample vector is the trace of a unique
//! cosine polynomial of degree `n − 1`, which satisfies the zero Neumann
//! condition exactly. Derivatives of that interpolant give spectrally
//! accurate second derivatives, and seeded random cosine series provide
//! smooth Neumann test fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{Axis, Grid, SpatialField};

/// Dense `n × n` row-major matrices of `d/dx` and `d²/dx²` of the cosine interpolant.
fn dct_derivatives(ax: &Axis) -> (Vec<f64>, Vec<f64>) {
    let n = ax.nodes;
    let big_n = (n - 1) as f64;
    let mut d1 = vec![0.0; n * n];
    let mut d2 = vec![0.0; n * n];
    for k in 0..n {
        let wk = k as f64 * PI / ax.length();
        let ck = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
        // coefficient functional a_k = (2/N) Σ_l w_l u_l cos(π l k / N)
        let analysis: Vec<f64> = (0..n)
            .map(|l| {
                let wl = if l == 0 || l == n - 1 { 0.5 } else { 1.0 };
                2.0 / big_n * wl * (PI * (l * k) as f64 / big_n).cos()
            })
            .collect();
        for j in 0..n {
            let arg = PI * (j * k) as f64 / big_n;
            let s1 = -ck * wk * arg.sin();
            let s2 = -ck * wk * wk * arg.cos();
            for (l, a) in analysis.iter().enumerate() {
                d1[j * n + l] += s1 * a;
                d2[j * n + l] += s2 * a;
            }
        }
    }
    (d1, d2)
}

/// Applies a dense axis matrix to a tensor field.
fn apply_axis(mat: &[f64], values: &[f64], dims: &[usize], axis: usize) -> Vec<f64> {
    let n = dims[axis];
    let inner: usize = dims[..axis].iter().product();
    let outer: usize = dims[axis + 1..].iter().product();
    let mut out = vec![0.0; values.len()];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                let row = &mat[j * n..(j + 1) * n];
                let mut acc = 0.0;
                for (l, m) in row.iter().enumerate() {
                    acc += m * values[(o * n + l) * inner + i];
                }
                out[(o * n + j) * inner + i] = acc;
            }
        }
    }
    out
}

/// Spectral second derivatives `∂²u/∂x_i∂x_j` of the cosine interpolant (`[i][j]`).
pub fn spectral_hessian(u: &SpatialField) -> Vec<Vec<SpatialField>> {
    let grid = *u.grid();
    let dims = grid.spatial_dims();
    let mats: Vec<_> = grid.axes().iter().map(dct_derivatives).collect();
    let dim = grid.dim();
    let first: Vec<Vec<f64>> = (0..dim).map(|a| apply_axis(&mats[a].0, u.values(), &dims, a)).collect();
    let mut out = vec![Vec::with_capacity(dim); dim];
    for (i, row) in out.iter_mut().enumerate() {
        for j in 0..dim {
            let v = if i == j {
                apply_axis(&mats[i].1, u.values(), &dims, i)
            } else {
                apply_axis(&mats[j].0, &first[i], &dims, j)
            };
            row.push(SpatialField::new(grid, v).expect("finite derivatives of finite data"));
        }
    }
    out
}

/// Spectral gradient of the cosine interpolant.
pub fn spectral_gradient(u: &SpatialField) -> Vec<SpatialField> {
    let grid = *u.grid();
    let dims = grid.spatial_dims();
    grid.axes()
        .iter()
        .enumerate()
        .map(|(a, ax)| {
            let (d1, _) = dct_derivatives(ax);
            SpatialField::new(grid, apply_axis(&d1, u.values(), &dims, a)).expect("finite")
        })
        .collect()
}

/// Power-law spectrum of a random cosine series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spectrum {
    /// Largest wavenumber per axis.
    pub mode_cap: usize,
    /// Coefficients of mode `k` have standard deviation `(1 + |k|)^(−decay)`.
    pub decay: f64,
}

impl Default for Spectrum {
    fn default() -> Self {
        Self { mode_cap: 6, decay: 2.0 }
    }
}

/// One cosine mode `amplitude · Π_a cos(k_a π (x_a − lo_a)/L_a)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub wavenumbers: [usize; 2],
    pub amplitude: f64,
}

impl Spectrum {
    pub fn validate(&self) -> Result<()> {
        if self.mode_cap == 0 {
            return Err(Error::InvalidParameter("mode cap must be at least 1".into()));
        }
        if !self.decay.is_finite() || self.decay < 0.0 {
            return Err(Error::InvalidParameter(format!("spectral decay must be non-negative, got {}", self.decay)));
        }
        Ok(())
    }

    /// Seeded coefficients for every wavevector up to the cap.
    pub fn sample(&self, dim: usize, rng: &mut impl Rng) -> Vec<Mode> {
        let cap = self.mode_cap;
        let ky_max = if dim == 2 { cap } else { 0 };
        let mut modes = Vec::new();
        for ky in 0..=ky_max {
            for kx in 0..=cap {
                let z: f64 = rng.sample(StandardNormal);
                let norm = ((kx * kx + ky * ky) as f64).sqrt();
                modes.push(Mode {
                    wavenumbers: [kx, ky],
                    amplitude: z * (1.0 + norm).powf(-self.decay),
                });
            }
        }
        modes
    }
}

/// Evaluates `Σ modes` on the spatial nodes of `grid`.
pub fn cosine_series(grid: &Grid, modes: &[Mode]) -> SpatialField {
    SpatialField::from_fn(*grid, |x| {
        modes
            .iter()
            .map(|m| {
                let mut v = m.amplitude;
                for (a, ax) in grid.axes().iter().enumerate() {
                    v *= (m.wavenumbers[a] as f64 * PI * (x[a] - ax.lo) / ax.length()).cos();
                }
                v
            })
            .sum()
    })
}

/// Seeded random Neumann field with the given spectrum.
pub fn random_cosine_field(grid: &Grid, spectrum: &Spectrum, seed: u64) -> Result<SpatialField> {
    spectrum.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes = spectrum.sample(grid.dim(), &mut rng);
    Ok(cosine_series(grid, &modes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_derivatives_are_exact_for_cosines() {
        let g = Grid::new(&[(0.0, 2.0)], &[17], 1.0, 3).unwrap();
        let w = 3.0 * PI / 2.0;
        let u = SpatialField::from_fn(g, |x| (w * x[0]).cos());
        let hess = spectral_hessian(&u);
        let grad = spectral_gradient(&u);
        for s in 0..17 {
            let x = g.spatial_coords(s)[0];
            assert!((hess[0][0].values()[s] + w * w * (w * x).cos()).abs() < 1e-11);
            assert!((grad[0].values()[s] + w * (w * x).sin()).abs() < 1e-11);
        }
    }

    #[test]
    fn mixed_derivative_in_2d() {
        let g = Grid::new(&[(0.0, 1.0), (0.0, 1.0)], &[9, 11], 1.0, 3).unwrap();
        let u = SpatialField::from_fn(g, |x| (PI * x[0]).cos() * (2.0 * PI * x[1]).cos());
        let hess = spectral_hessian(&u);
        for s in 0..g.spatial_len() {
            let [x, y] = g.spatial_coords(s);
            let exact = 2.0 * PI * PI * (PI * x).sin() * (2.0 * PI * y).sin();
            assert!((hess[0][1].values()[s] - exact).abs() < 1e-10);
            assert!((hess[1][0].values()[s] - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn random_fields_are_deterministic() {
        let g = Grid::new(&[(0.0, 1.0)], &[33], 1.0, 3).unwrap();
        let sp = Spectrum::default();
        let a = random_cosine_field(&g, &sp, 7).unwrap();
        let b = random_cosine_field(&g, &sp, 7).unwrap();
        let c = random_cosine_field(&g, &sp, 8).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
        assert!(random_cosine_field(&g, &Spectrum { mode_cap: 0, decay: 1.0 }, 1).is_err());
    }
}
