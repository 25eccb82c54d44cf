//! Linear solvers used by the time-marching schemes and the reconstruction.

use crate::error::{Error, Result};

/// Solves a tridiagonal system with the Thomas algorithm.
///
/// `lower[i]` couples row `i` to `i - 1` (ignored for `i = 0`), `upper[i]`
/// couples row `i` to `i + 1` (ignored for the last row).
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    assert!(lower.len() == n && upper.len() == n && rhs.len() == n);
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom.abs() < f64::MIN_POSITIVE {
        return Err(Error::LinearSolve("zero pivot in tridiagonal solve".into()));
    }
    c[0] = upper[0] / denom;
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c[i - 1];
        if denom.abs() < f64::MIN_POSITIVE || !denom.is_finite() {
            return Err(Error::LinearSolve(format!("zero pivot at row {i} in tridiagonal solve")));
        }
        c[i] = upper[i] / denom;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    Ok(x)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Outcome of an iterative solve.
#[derive(Clone, Debug, PartialEq)]
pub struct KrylovInfo {
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
    /// Set when CG met a direction with `pᵀAp ≤ 0`.
    pub breakdown: bool,
    /// Values of the quadratic model `½xᵀAx − bᵀx` after each iteration.
    pub model_history: Vec<f64>,
}

/// Jacobi-preconditioned conjugate gradients for SPD `apply`.
///
/// Stops when `‖r‖ ≤ tol · ‖b‖` or after `max_iter` iterations, starting
/// from `x` (overwritten with the result).
pub fn pcg(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    precond_diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> KrylovInfo {
    let inv: Vec<f64> = precond_diag
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let jacobi = |r: &[f64]| r.iter().zip(&inv).map(|(r, m)| r * m).collect();
    pcg_with(apply, jacobi, b, x, tol, max_iter)
}

/// CG with a general SPD preconditioner `precond(r) ≈ A⁻¹r`.
pub fn pcg_with(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    precond: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> KrylovInfo {
    let n = b.len();
    let ax = apply(x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let b_norm = norm2(b).max(f64::MIN_POSITIVE);
    let model = |x: &[f64], r: &[f64]| -> f64 {
        // ½xᵀAx − bᵀx = −½xᵀ(b + r)
        -0.5 * x.iter().zip(b.iter().zip(r)).map(|(x, (b, r))| x * (b + r)).sum::<f64>()
    };
    let mut model_history = vec![model(x, &r)];
    let mut z: Vec<f64> = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut res = norm2(&r);
    let mut info = KrylovInfo {
        iterations: 0,
        residual_norm: res,
        converged: res <= tol * b_norm,
        breakdown: false,
        model_history: Vec::new(),
    };
    if info.converged {
        info.model_history = model_history;
        return info;
    }
    for it in 1..=max_iter {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            info.breakdown = true;
            break;
        }
        let alpha = rz / pap;
        axpy(alpha, &p, x);
        axpy(-alpha, &ap, &mut r);
        res = norm2(&r);
        model_history.push(model(x, &r));
        info.iterations = it;
        info.residual_norm = res;
        if res <= tol * b_norm {
            info.converged = true;
            break;
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    info.model_history = model_history;
    info
}

/// Jacobi-preconditioned BiCGSTAB for general nonsingular `apply`.
pub fn bicgstab(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    precond_diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> KrylovInfo {
    let n = b.len();
    let inv: Vec<f64> = precond_diag
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&inv).map(|(a, m)| a * m).collect() };
    let ax = apply(x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let r_hat = r.clone();
    let b_norm = norm2(b).max(f64::MIN_POSITIVE);
    let mut info = KrylovInfo {
        iterations: 0,
        residual_norm: norm2(&r),
        converged: norm2(&r) <= tol * b_norm,
        breakdown: false,
        model_history: Vec::new(),
    };
    if info.converged {
        return info;
    }
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < f64::MIN_POSITIVE {
            info.breakdown = true;
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let y = precond(&p);
        v = apply(&y);
        alpha = rho / dot(&r_hat, &v);
        let s: Vec<f64> = r.iter().zip(&v).map(|(r, v)| r - alpha * v).collect();
        axpy(alpha, &y, x);
        info.iterations = it;
        if norm2(&s) <= tol * b_norm {
            info.residual_norm = norm2(&s);
            info.converged = true;
            break;
        }
        let z = precond(&s);
        let t = apply(&z);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        axpy(omega, &z, x);
        for i in 0..n {
            r[i] = s[i] - omega * t[i];
        }
        info.residual_norm = norm2(&r);
        if info.residual_norm <= tol * b_norm {
            info.converged = true;
            break;
        }
        if omega == 0.0 {
            info.breakdown = true;
            break;
        }
    }
    info
}

/// Banded Cholesky factor of a symmetric matrix under a symmetric permutation.
pub struct BandCholesky {
    n: usize,
    bw: usize,
    /// Row `i` holds `L[i][i-bw..=i]`.
    l: Vec<f64>,
    /// `perm[new] = old`.
    perm: Vec<usize>,
}

impl BandCholesky {
    /// Factors `P A Pᵀ`; `None` when a pivot is not positive.
    pub fn factor(a: &crate::sparse::CsrMatrix, perm: &[usize]) -> Option<Self> {
        let n = a.nrows();
        assert!(a.ncols() == n && perm.len() == n);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut bw = 0;
        for r in 0..n {
            for (c, _) in a.row(r) {
                bw = bw.max(inv[r].abs_diff(inv[c]));
            }
        }
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        for r in 0..n {
            let i = inv[r];
            for (c, v) in a.row(r) {
                let j = inv[c];
                if j <= i {
                    l[i * w + (j + bw - i)] = v;
                }
            }
        }
        for i in 0..n {
            let lo_i = i.saturating_sub(bw);
            for j in lo_i..=i {
                let lo = lo_i.max(j.saturating_sub(bw));
                let mut s = l[i * w + (j + bw - i)];
                for k in lo..j {
                    s -= l[i * w + (k + bw - i)] * l[j * w + (k + bw - j)];
                }
                if j == i {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    l[i * w + bw] = s.sqrt();
                } else {
                    l[i * w + (j + bw - i)] = s / l[j * w + bw];
                }
            }
        }
        Some(Self { n, bw, l, perm: perm.to_vec() })
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut y: Vec<f64> = self.perm.iter().map(|&o| b[o]).collect();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = y[i];
            for k in lo..i {
                s -= self.l[i * w + (k + bw - i)] * y[k];
            }
            y[i] = s / self.l[i * w + bw];
        }
        for i in (0..n).rev() {
            y[i] /= self.l[i * w + bw];
            let lo = i.saturating_sub(bw);
            let yi = y[i];
            for k in lo..i {
                y[k] -= self.l[i * w + (k + bw - i)] * yi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}
