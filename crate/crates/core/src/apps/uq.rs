//! Uncertainty quantification: first-order expansion of the robust
//! distance-to-failure-set problem `inf_{nu in B_delta(mu)} E_nu[d(G(X), E)]`.
//!
//! The value decreases at rate `(int ||grad d(G(x), E) J_G(x)||^q dmu)^{1/q}`;
//! the minimizing measure pushes every atom mapped outside `E` toward its
//! orthogonal projection.

use super::AppError;
use crate::measures::{DiscreteMeasure, NormSpec};
use nalgebra::{DMatrix, DVector};

/// Convex sets with exact Euclidean projection and distance.
#[derive(Debug, Clone)]
pub enum ConvexTarget {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Halfspace { normal: Vec<f64>, offset: f64 },
}

impl ConvexTarget {
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            ConvexTarget::Ball { center, radius } => {
                let c = DVector::from_column_slice(center);
                let d = x - &c;
                let n = d.norm();
                if n <= *radius {
                    x.clone()
                } else {
                    c + d * (*radius / n)
                }
            }
            ConvexTarget::Box { lo, hi } => {
                DVector::from_fn(x.len(), |i, _| x[i].clamp(lo[i], hi[i]))
            }
            ConvexTarget::Halfspace { normal, offset } => {
                let n = DVector::from_column_slice(normal);
                let v = n.dot(x);
                if v <= *offset {
                    x.clone()
                } else {
                    x - &n * ((v - offset) / n.norm_squared())
                }
            }
        }
    }

    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        (x - self.project(x)).norm()
    }

    /// Signed margin to the boundary: positive inside, negative outside,
    /// zero on the boundary.
    pub fn boundary_margin(&self, x: &DVector<f64>) -> f64 {
        match self {
            ConvexTarget::Ball { center, radius } => {
                radius - (x - DVector::from_column_slice(center)).norm()
            }
            ConvexTarget::Box { lo, hi } => {
                let mut m = f64::INFINITY;
                for i in 0..x.len() {
                    m = m.min(x[i] - lo[i]).min(hi[i] - x[i]);
                }
                m
            }
            ConvexTarget::Halfspace { normal, offset } => {
                let n = DVector::from_column_slice(normal);
                (offset - n.dot(x)) / n.norm()
            }
        }
    }
}

/// Smooth maps `G` with Jacobians, for pushing the input law through the
/// system response.
#[derive(Debug, Clone)]
pub enum SmoothMap {
    Identity,
    Scale(f64),
    Linear(DMatrix<f64>),
}

impl SmoothMap {
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            SmoothMap::Identity => x.clone(),
            SmoothMap::Scale(c) => x * *c,
            SmoothMap::Linear(m) => m * x,
        }
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            SmoothMap::Identity => DMatrix::identity(x.len(), x.len()),
            SmoothMap::Scale(c) => DMatrix::identity(x.len(), x.len()) * *c,
            SmoothMap::Linear(m) => m.clone(),
        }
    }
}

/// First-order expansion of the robust reliability value.
#[derive(Debug, Clone)]
pub struct UqExpansion {
    /// `E_mu[d(G(X), E)]`.
    pub base: f64,
    /// Decrease rate of the infimum (nonnegative).
    pub slope: f64,
    /// `base - slope * delta`.
    pub first_order: f64,
}

/// Expand `inf_{nu in B_delta(mu)} E_nu[d(G(X), E)]` to first order.
///
/// Atoms mapped onto the boundary of `E` (within `1e-9`) are an error: the
/// distance is not differentiable there and the weak-derivative route needs
/// them to carry no mass.
pub fn uq_first_order(
    map: &SmoothMap,
    target: &ConvexTarget,
    mu: &DiscreteMeasure,
    norm: &NormSpec,
    delta: f64,
) -> Result<UqExpansion, AppError> {
    let q = norm.q();
    if !q.is_finite() {
        return Err(AppError::BadInput(
            "the expansion needs transport order p > 1".into(),
        ));
    }
    let on_boundary: Vec<usize> = mu
        .atoms()
        .iter()
        .enumerate()
        .filter(|(_, x)| target.boundary_margin(&map.apply(x)).abs() <= 1e-9)
        .map(|(i, _)| i)
        .collect();
    if !on_boundary.is_empty() {
        return Err(AppError::BadInput(format!(
            "atoms {on_boundary:?} are mapped onto the boundary of the target set, where the \
             distance gradient is undefined"
        )));
    }
    let base = mu.integrate(|x| target.distance(&map.apply(x)));
    let mass = mu.integrate(|x| {
        let gx = map.apply(x);
        let dist = target.distance(&gx);
        if dist == 0.0 {
            return 0.0; // interior: gradient vanishes
        }
        let u = (gx.clone() - target.project(&gx)) / dist;
        let pullback = map.jacobian(x).transpose() * u;
        norm.seminorm(&pullback).powf(q)
    });
    let slope = mass.powf(1.0 / q);
    Ok(UqExpansion {
        base,
        slope,
        first_order: base - slope * delta,
    })
}
