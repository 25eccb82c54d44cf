use serde::{Deserialize, Serialize};

use crate::grid::{Field, Grid};
use crate::error::{Error, Result};

/// Kernel `M(x, y)` of the nonlocal interaction `∫_Ω M(x, y) m(y, t) dy`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    Zero,
    /// `amplitude · exp(−|x − y|² / σ²)`.
    Gaussian { sigma: f64, amplitude: f64 },
}

/// The interaction function `F(y, z)`, `y` the nonlocal average and `z = m(x, t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Coupling {
    Zero,
    /// `γ_y · y + γ_z · z`.
    Linear { gamma_y: f64, gamma_z: f64 },
    /// `γ_y · tanh(y) + γ_z · tanh(z)`; globally Lipschitz with bound `max(|γ_y|, |γ_z|)`.
    Tanh { gamma_y: f64, gamma_z: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionSpec {
    pub kernel: Kernel,
    pub coupling: Coupling,
}

impl Default for InteractionSpec {
    fn default() -> Self {
        Self {
            kernel: Kernel::Zero,
            coupling: Coupling::Zero,
        }
    }
}

impl Kernel {
    /// `sup |M|` over Ω × Ω (attained on the diagonal).
    pub fn sup_abs(&self) -> f64 {
        match self {
            Kernel::Zero => 0.0,
            Kernel::Gaussian { amplitude, .. } => amplitude.abs(),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Kernel::Zero => 0.0,
            Kernel::Gaussian { sigma, amplitude } => {
                let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                amplitude * (-r2 / (sigma * sigma)).exp()
            }
        }
    }

    /// One separable factor `exp(−(x − y)²/σ²)` (amplitude excluded).
    pub(crate) fn factor(&self, x: f64, y: f64) -> f64 {
        match self {
            Kernel::Zero => 0.0,
            Kernel::Gaussian { sigma, .. } => (-(x - y) * (x - y) / (sigma * sigma)).exp(),
        }
    }

    pub(crate) fn amplitude(&self) -> f64 {
        match self {
            Kernel::Zero => 0.0,
            Kernel::Gaussian { amplitude, .. } => *amplitude,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Kernel::Gaussian { sigma, amplitude } if !(*sigma > 0.0) || !amplitude.is_finite() => Err(
                Error::InvalidParameter(format!("gaussian kernel needs sigma > 0, got {sigma}")),
            ),
            _ => Ok(()),
        }
    }
}

impl Coupling {
    pub fn value(&self, y: f64, z: f64) -> f64 {
        match *self {
            Coupling::Zero => 0.0,
            Coupling::Linear { gamma_y, gamma_z } => gamma_y * y + gamma_z * z,
            Coupling::Tanh { gamma_y, gamma_z } => gamma_y * y.tanh() + gamma_z * z.tanh(),
        }
    }

    /// `F_y(y, z)`.
    pub fn d_y(&self, y: f64, _z: f64) -> f64 {
        match *self {
            Coupling::Zero => 0.0,
            Coupling::Linear { gamma_y, .. } => gamma_y,
            Coupling::Tanh { gamma_y, .. } => gamma_y * (1.0 - y.tanh().powi(2)),
        }
    }

    /// `F_z(y, z)`.
    pub fn d_z(&self, _y: f64, z: f64) -> f64 {
        match *self {
            Coupling::Zero => 0.0,
            Coupling::Linear { gamma_z, .. } => gamma_z,
            Coupling::Tanh { gamma_z, .. } => gamma_z * (1.0 - z.tanh().powi(2)),
        }
    }

    /// Certified `max(sup|F_y|, sup|F_z|)` over ℝ².
    pub fn derivative_bound(&self) -> f64 {
        match *self {
            Coupling::Zero => 0.0,
            Coupling::Linear { gamma_y, gamma_z } | Coupling::Tanh { gamma_y, gamma_z } => {
                gamma_y.abs().max(gamma_z.abs())
            }
        }
    }

    /// Mean-value slopes `(f₁, f₂)` with
    /// `F(y₁, z₁) − F(y₂, z₂) = f₁ (y₁ − y₂) + f₂ (z₁ − z₂)`.
    ///
    /// The path goes `(y₂, z₂) → (y₂, z₁) → (y₁, z₁)`; a zero increment falls
    /// back to the partial derivative, so `|f₁|, |f₂|` never exceed the bound.
    pub fn mean_value_slopes(&self, (y1, z1): (f64, f64), (y2, z2): (f64, f64)) -> (f64, f64) {
        let f1 = if y1 != y2 {
            (self.value(y1, z1) - self.value(y2, z1)) / (y1 - y2)
        } else {
            self.d_y(y1, z1)
        };
        let f2 = if z1 != z2 {
            (self.value(y2, z1) - self.value(y2, z2)) / (z1 - z2)
        } else {
            self.d_z(y2, z1)
        };
        (f1, f2)
    }
}

/// Discrete nonlocal averaging `m ↦ ∫_Ω M(·, y) m(y) dy` on one time slice.
///
/// The Gaussian kernel factors over the axes, so the quadrature is applied
/// axis by axis with trapezoid weights.
#[derive(Clone, Debug)]
pub struct InteractionOperator {
    dims: Vec<usize>,
    amplitude: f64,
    /// Per-axis dense `n × n` matrices `exp(−(xᵢ − yⱼ)²/σ²) wⱼ`, row-major.
    factors: Vec<Vec<f64>>,
}

impl InteractionOperator {
    pub fn new(grid: &Grid, kernel: &Kernel) -> Self {
        let factors = grid
            .axes()
            .iter()
            .map(|a| {
                let w = a.weights();
                let n = a.nodes;
                let mut k = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        k[i * n + j] = kernel.factor(a.coord(i), a.coord(j)) * w[j];
                    }
                }
                k
            })
            .collect();
        Self {
            dims: grid.spatial_dims(),
            amplitude: kernel.amplitude(),
            factors,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.amplitude == 0.0
    }

    /// Applies the averaging to one spatial slice.
    pub fn apply(&self, slice: &[f64]) -> Vec<f64> {
        self.apply_impl(slice, false)
    }

    /// Applies the transpose of the slice matrix (the discrete adjoint).
    pub fn apply_transpose(&self, slice: &[f64]) -> Vec<f64> {
        self.apply_impl(slice, true)
    }

    fn apply_impl(&self, slice: &[f64], transpose: bool) -> Vec<f64> {
        let ns: usize = self.dims.iter().product();
        if self.is_zero() {
            return vec![0.0; ns];
        }
        let mut cur = slice.to_vec();
        for (axis, k) in self.factors.iter().enumerate() {
            let n = self.dims[axis];
            let transposed;
            let k = if transpose {
                transposed = (0..n * n).map(|e| k[(e % n) * n + e / n]).collect::<Vec<f64>>();
                &transposed
            } else {
                k
            };
            let inner: usize = self.dims[..axis].iter().product();
            let outer: usize = self.dims[axis + 1..].iter().product();
            let mut next = vec![0.0; ns];
            if inner == 1 {
                for o in 0..outer {
                    let src = &cur[o * n..(o + 1) * n];
                    for (i, row) in k.chunks_exact(n).enumerate() {
                        next[o * n + i] = row.iter().zip(src).map(|(a, b)| a * b).sum();
                    }
                }
                cur = next;
                continue;
            }
            for o in 0..outer {
                for i in 0..n {
                    for j in 0..n {
                        let kij = k[i * n + j];
                        let src = (o * n + j) * inner;
                        let dst = (o * n + i) * inner;
                        for q in 0..inner {
                            next[dst + q] += kij * cur[src + q];
                        }
                    }
                }
            }
            cur = next;
        }
        for v in &mut cur {
            *v *= self.amplitude;
        }
        cur
    }

    /// Dense `ns × ns` slice matrix (row-major), the Kronecker product of the factors.
    pub fn dense(&self) -> Vec<f64> {
        let ns: usize = self.dims.iter().product();
        let mut out = vec![0.0; ns * ns];
        let mut unit = vec![0.0; ns];
        for j in 0..ns {
            unit[j] = 1.0;
            let col = self.apply(&unit);
            for i in 0..ns {
                out[i * ns + j] = col[i];
            }
            unit[j] = 0.0;
        }
        out
    }

    /// `Ĩᵀ` applied slice by slice.
    pub fn apply_transpose_field(&self, w: &Field) -> Field {
        let grid = *w.grid();
        let mut values = Vec::with_capacity(grid.len());
        for n in 0..grid.time_len() {
            values.extend(self.apply_transpose(w.slice(n)));
        }
        Field::new(grid, values).expect("finite input gives finite output")
    }

    /// The averaged field at every time node.
    pub fn apply_field(&self, m: &Field) -> Field {
        let grid = *m.grid();
        let mut values = Vec::with_capacity(grid.len());
        for n in 0..grid.time_len() {
            values.extend(self.apply(m.slice(n)));
        }
        Field::new(grid, values).expect("finite input gives finite output")
    }
}

/// `F(∫_Ω M(x, y) m(y, t) dy, m(x, t))` at every node.
pub fn interaction_value(m: &Field, spec: &InteractionSpec) -> Field {
    let op = InteractionOperator::new(m.grid(), &spec.kernel);
    interaction_with(m, &op, &spec.coupling)
}

pub(crate) fn interaction_with(m: &Field, op: &InteractionOperator, coupling: &Coupling) -> Field {
    if matches!(coupling, Coupling::Zero) {
        return Field::zeros(*m.grid());
    }
    let avg = op.apply_field(m);
    avg.zip_map(m, |y, z| coupling.value(y, z)).expect("same grid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Grid {
        Grid::new(&[(0.0, 1.0)], &[n], 1.0, 3).unwrap()
    }

    #[test]
    fn transpose_is_adjoint() {
        let g = Grid::new(&[(0.0, 1.0), (0.0, 2.0)], &[5, 7], 1.0, 3).unwrap();
        let op = InteractionOperator::new(&g, &Kernel::Gaussian { sigma: 0.4, amplitude: 1.5 });
        let a: Vec<f64> = (0..35).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..35).map(|i| (i as f64 * 0.91).cos()).collect();
        let lhs: f64 = op.apply(&a).iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(op.apply_transpose(&b)).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-13 * lhs.abs().max(1.0));
    }

    #[test]
    fn identity_and_zero_interactions() {
        let g = grid(9);
        let m = Field::from_fn(g, |x, t| 1.0 + x[0] * t);
        let ident = InteractionSpec {
            kernel: Kernel::Zero,
            coupling: Coupling::Linear { gamma_y: 0.0, gamma_z: 1.0 },
        };
        assert_eq!(interaction_value(&m, &ident), m);
        let zero = InteractionSpec {
            kernel: Kernel::Gaussian { sigma: 0.2, amplitude: 1.0 },
            coupling: Coupling::Zero,
        };
        assert_eq!(interaction_value(&m, &zero).sup_abs(), 0.0);
    }

    #[test]
    fn gaussian_average_of_one_at_centre() {
        // Oracle: composite Simpson on 20000 panels of exp(−(0.5−y)²/0.04) over [0, 1].
        let panels = 20_000;
        let h = 1.0 / panels as f64;
        let f = |y: f64| (-(0.5 - y) * (0.5 - y) / 0.04).exp();
        let mut oracle = f(0.0) + f(1.0);
        for i in 1..panels {
            oracle += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        oracle *= h / 3.0;
        // closed form: σ√π·erf(0.5/σ)
        assert!((oracle - 0.354_347).abs() < 1e-5);

        let g = grid(257);
        let spec = InteractionSpec {
            kernel: Kernel::Gaussian { sigma: 0.2, amplitude: 1.0 },
            coupling: Coupling::Linear { gamma_y: 1.0, gamma_z: 0.0 },
        };
        let v = interaction_value(&Field::constant(g, 1.0), &spec);
        assert!((v.at(128, 0) - oracle).abs() < 1e-5);
    }

    #[test]
    fn dense_matches_apply_in_2d() {
        let g = Grid::new(&[(0.0, 1.0), (0.0, 2.0)], &[4, 5], 1.0, 3).unwrap();
        let op = InteractionOperator::new(&g, &Kernel::Gaussian { sigma: 0.5, amplitude: 2.0 });
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let d = op.dense();
        let via = op.apply(&x);
        for i in 0..20 {
            let row: f64 = (0..20).map(|j| d[i * 20 + j] * x[j]).sum();
            assert!((row - via[i]).abs() < 1e-13);
        }
        // the separable factors reproduce the full kernel times the tensor weights
        let w = g.spatial_weights();
        let k = Kernel::Gaussian { sigma: 0.5, amplitude: 2.0 };
        let (xi, xj) = (g.spatial_coords(3), g.spatial_coords(17));
        assert!((d[3 * 20 + 17] - k.eval(&xi, &xj) * w[17]).abs() < 1e-14);
    }

    #[test]
    fn mean_value_slopes_reproduce_differences() {
        let c = Coupling::Tanh { gamma_y: 0.7, gamma_z: -1.3 };
        for (p, q) in [((0.3, 2.0), (-1.0, 0.5)), ((1.0, 1.0), (1.0, -2.0)), ((0.2, 0.1), (0.2, 0.1))] {
            let (f1, f2) = c.mean_value_slopes(p, q);
            let lhs = c.value(p.0, p.1) - c.value(q.0, q.1);
            assert!((lhs - (f1 * (p.0 - q.0) + f2 * (p.1 - q.1))).abs() < 1e-15);
            assert!(f1.abs() <= 0.7 + 1e-15 && f2.abs() <= 1.3 + 1e-15);
        }
    }
}
