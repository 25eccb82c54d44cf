use serde::{Deserialize, Serialize};

use super::{Derivative, Field, Grid, Region, SpatialDerivative, SpatialField};
use crate::error::{Error, Result};

/// Sobolev-type norms used by the stability estimates.
///
/// Space-time kinds integrate over a slab of the cylinder; each distinct
/// partial derivative is counted once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormKind {
    /// `‖u‖_{L²}` over a slab.
    L2Q,
    /// `u` and `∇u`.
    H10Q,
    /// `u`, `∇u` and `u_t`.
    H1Q,
    /// `u`, `∇u`, `u_t` and all second spatial derivatives.
    H21Q,
    /// All derivatives of order ≤ 2 in `(x, t)`.
    H2Q,
    /// `‖u(·, t)‖_{L²(Ω)}`.
    L2OmegaAt,
    /// `‖u(·, t)‖_{H¹(Ω)}`.
    H1OmegaAt,
}

fn sq(f: &Field) -> Field {
    f.map(|v| v * v)
}

/// The derivative set whose squares make up each space-time norm.
pub(crate) fn constituents(kind: NormKind, dim: usize) -> Vec<Option<Derivative>> {
    let mut parts = vec![None];
    let grad = (0..dim).map(|a| Some(Derivative::X(a)));
    let second_space = || {
        let mut v: Vec<Option<Derivative>> = (0..dim).map(|a| Some(Derivative::XX(a))).collect();
        if dim == 2 {
            v.push(Some(Derivative::XY));
        }
        v
    };
    match kind {
        NormKind::L2Q | NormKind::L2OmegaAt => {}
        NormKind::H10Q | NormKind::H1OmegaAt => parts.extend(grad),
        NormKind::H1Q => {
            parts.extend(grad);
            parts.push(Some(Derivative::T));
        }
        NormKind::H21Q => {
            parts.extend(grad);
            parts.push(Some(Derivative::T));
            parts.extend(second_space());
        }
        NormKind::H2Q => {
            parts.extend(grad);
            parts.push(Some(Derivative::T));
            parts.extend(second_space());
            parts.push(Some(Derivative::TT));
            parts.extend((0..dim).map(|a| Some(Derivative::TX(a))));
        }
    }
    parts
}

/// Norm of `field` of the given kind over `region`.
///
/// Derivatives are always taken on the full field and then integrated over
/// the region, so slab norms do not lose accuracy at the slab ends.
pub fn norm(field: &Field, kind: NormKind, region: Region) -> Result<f64> {
    let grid: Grid = *field.grid();
    match (kind, region) {
        (NormKind::L2OmegaAt | NormKind::H1OmegaAt, Region::At(t)) => {
            let n = grid.snap(t)?;
            return spatial_norm(&field.trace(n), kind);
        }
        (NormKind::L2OmegaAt | NormKind::H1OmegaAt, _) => {
            return Err(Error::InvalidParameter(format!("{kind:?} needs a Region::At")));
        }
        (_, Region::At(_)) => {
            return Err(Error::InvalidParameter(format!("{kind:?} needs a space-time region")));
        }
        _ => {}
    }
    let mut total = 0.0;
    for part in constituents(kind, grid.dim()) {
        let f = match part {
            None => sq(field),
            Some(d) => sq(&field.derivative(d)?),
        };
        total += grid.integrate(&f, region)?;
    }
    Ok(total.max(0.0).sqrt())
}

/// `L²(Ω)` or `H¹(Ω)` norm of a spatial trace.
pub fn spatial_norm(trace: &SpatialField, kind: NormKind) -> Result<f64> {
    let w = trace.grid().spatial_weights();
    let sqint = |f: &SpatialField| -> f64 { f.values().iter().zip(&w).map(|(v, w)| v * v * w).sum() };
    let mut total = sqint(trace);
    match kind {
        NormKind::L2OmegaAt => {}
        NormKind::H1OmegaAt => {
            for a in 0..trace.grid().dim() {
                total += sqint(&trace.derivative(SpatialDerivative::X(a))?);
            }
        }
        other => {
            return Err(Error::InvalidParameter(format!("{other:?} is not a spatial norm")));
        }
    }
    Ok(total.max(0.0).sqrt())
}
