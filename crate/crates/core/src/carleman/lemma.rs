use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{SpatialDerivative, SpatialField};
use crate::spectral::spectral_hessian;

/// How second derivatives are obtained for the Laplacian identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianRoute {
    /// Exact derivatives of the cosine interpolant.
    #[default]
    Spectral,
    /// Mirror-ghost central differences (gap decays like `h²`).
    FiniteDifference,
}

/// Both sides of `∫(Δu)² = Σ_{ij} ∫u_{x_i x_j}²` and their relative gap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma31Check {
    pub lhs: f64,
    pub rhs: f64,
    /// `|lhs − rhs| / max(lhs, 1)`.
    pub relative_gap: f64,
}

/// Largest acceptable one-sided normal-derivative estimate.
const NEUMANN_TOL: f64 = 5e-2;

pub fn lemma31_check(u: &SpatialField) -> Result<Lemma31Check> {
    lemma31_check_with(u, HessianRoute::Spectral)
}

pub fn lemma31_check_with(u: &SpatialField, route: HessianRoute) -> Result<Lemma31Check> {
    let defect = u.neumann_defect();
    if defect > NEUMANN_TOL {
        return Err(Error::Neumann(format!("normal derivative estimate {defect:.3e} on the boundary")));
    }
    let grid = *u.grid();
    let dim = grid.dim();
    let hess: Vec<Vec<SpatialField>> = match route {
        HessianRoute::Spectral => spectral_hessian(u),
        HessianRoute::FiniteDifference => (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| {
                        let d = if i == j { SpatialDerivative::XX(i) } else { SpatialDerivative::XY };
                        u.derivative(d)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?,
    };
    let mut lap = SpatialField::zeros(grid);
    for (i, row) in hess.iter().enumerate() {
        lap = lap.add(&row[i])?;
    }
    let lhs = lap.zip_map(&lap, |a, b| a * b)?.integrate();
    let mut rhs = 0.0;
    for row in &hess {
        for d in row {
            rhs += d.zip_map(d, |a, b| a * b)?.integrate();
        }
    }
    Ok(Lemma31Check {
        lhs,
        rhs,
        relative_gap: (lhs - rhs).abs() / lhs.max(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use std::f64::consts::PI;

    #[test]
    fn constant_field() {
        let g = Grid::new(&[(0.0, 1.0), (0.0, 1.0)], &[9, 9], 1.0, 3).unwrap();
        let c = lemma31_check(&SpatialField::constant(g, 3.0)).unwrap();
        assert!(c.lhs.abs() < 1e-20 && c.rhs.abs() < 1e-20 && c.relative_gap < 1e-20);
    }

    #[test]
    fn cosine_closed_forms() {
        let g1 = Grid::new(&[(0.0, 1.0)], &[129], 1.0, 3).unwrap();
        let c1 = lemma31_check(&SpatialField::from_fn(g1, |x| (PI * x[0]).cos())).unwrap();
        let oracle1 = PI.powi(4) / 2.0;
        assert!((c1.lhs - oracle1).abs() < 1e-9 * oracle1 && (c1.rhs - oracle1).abs() < 1e-9 * oracle1);
        let g2 = Grid::new(&[(0.0, 1.0), (0.0, 1.0)], &[33, 33], 1.0, 3).unwrap();
        let c2 = lemma31_check(&SpatialField::from_fn(g2, |x| (PI * x[0]).cos() * (PI * x[1]).cos())).unwrap();
        let oracle2 = PI.powi(4);
        assert!((c2.lhs - oracle2).abs() < 1e-9 * oracle2);
        assert!((c2.rhs - oracle2).abs() < 1e-9 * oracle2);
    }

    #[test]
    fn finite_difference_gap_is_second_order() {
        let gaps: Vec<f64> = [17, 33, 65]
            .iter()
            .map(|&n| {
                let g = Grid::new(&[(0.0, 1.0), (0.0, 1.0)], &[n, n], 1.0, 3).unwrap();
                let u = SpatialField::from_fn(g, |x| (PI * x[0]).cos() * (2.0 * PI * x[1]).cos() + (3.0 * PI * x[1]).cos());
                lemma31_check_with(&u, HessianRoute::FiniteDifference).unwrap().relative_gap
            })
            .collect();
        assert!((gaps[1] / gaps[2]).log2() > 1.8, "{gaps:?}");
    }

    #[test]
    fn rejects_non_neumann_fields() {
        let g = Grid::new(&[(0.0, 1.0)], &[33], 1.0, 3).unwrap();
        let u = SpatialField::from_fn(g, |x| x[0]);
        assert!(matches!(lemma31_check(&u), Err(Error::Neumann(_))));
    }
}
