//! The non-robust base problem `inf_a E_mu[f(X, a)]` (quasi-Newton descent)
//! and an advisory gradient-growth diagnostic.

use super::{CertificateSource, LossModel, OptimizerCertificate};
use crate::measures::DiscreteMeasure;
use crate::optim;
use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(
        "base problem did not reach stationarity {target:e} after {iterations} iterations; \
         best residual {residual:e} at {action:?}"
    )]
    NoConvergence {
        action: Vec<f64>,
        residual: f64,
        iterations: usize,
        target: f64,
    },
}

#[derive(Debug, Clone)]
pub struct SolveConfig {
    /// Stationarity target `|grad_a V(0, a)|_inf`.
    pub gtol: f64,
    pub max_iter: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        // 1e-8 keeps optimizer inexactness well below the finite-difference
        // deltas used downstream.
        SolveConfig {
            gtol: 1e-8,
            max_iter: 500,
        }
    }
}

/// Minimize `V(0, a) = E_mu[f(X, a)]` from `a0`.
pub fn solve_base_problem(
    loss: &LossModel,
    mu: &DiscreteMeasure,
    a0: &DVector<f64>,
    cfg: &SolveConfig,
) -> Result<OptimizerCertificate, SolveError> {
    let fg = |a: &DVector<f64>| {
        let v = mu.integrate(|x| loss.value(x, a));
        let g = mu.integrate_vec(loss.action_dim(), |x| loss.grad_a(x, a));
        (v, g)
    };
    let res = optim::bfgs(fg, a0, cfg.gtol, cfg.max_iter);
    if !res.converged {
        return Err(SolveError::NoConvergence {
            action: res.x.iter().copied().collect(),
            residual: res.grad_norm,
            iterations: res.iterations,
            target: cfg.gtol,
        });
    }
    Ok(OptimizerCertificate {
        action: res.x,
        residual: res.grad_norm,
        value: res.value,
        source: CertificateSource::Solved,
    })
}

/// Advisory report from [`check_growth`]. A raised flag means the empirical
/// gradient envelope degraded on the inflated hull; it certifies nothing.
#[derive(Debug, Clone)]
pub struct GrowthReport {
    /// No degradation observed.
    pub passed: bool,
    /// `max_atoms |grad_x f| / (1 + |x|^{p-1})`.
    pub fitted_c: f64,
    /// Worst envelope ratio over the inflated hull, relative to `fitted_c`.
    pub worst_inflation_ratio: f64,
    /// Inflation factor at which the worst ratio occurred.
    pub worst_factor: f64,
}

/// Fit `|grad_x f(x, 0)| <= c (1 + |x|^{p-1})` on the atoms of `mu`, then
/// probe the envelope on hulls inflated up to 10x around the barycentre.
///
/// Heuristic (growth conditions cannot be certified from samples): the flag
/// is raised when the inflated-hull ratio exceeds twice the atom fit.
pub fn check_growth(loss: &LossModel, mu: &DiscreteMeasure) -> GrowthReport {
    let a0 = DVector::zeros(loss.action_dim());
    let p = loss.growth_exponent();
    let envelope = |x: &DVector<f64>| 1.0 + x.norm().powf(p - 1.0);
    let ratio = |x: &DVector<f64>| loss.grad_x(x, &a0).norm() / envelope(x);

    let mut fitted_c = 0.0_f64;
    for (x, _) in mu.iter() {
        fitted_c = fitted_c.max(ratio(x));
    }
    let center = mu.mean();
    let mut worst = 0.0_f64;
    let mut worst_factor = 1.0;
    for factor in [2.0, 4.0, 7.0, 10.0] {
        for (x, _) in mu.iter() {
            let inflated = &center + (x - &center) * factor;
            let r = ratio(&inflated);
            if r > worst {
                worst = r;
                worst_factor = factor;
            }
        }
    }
    let denom = fitted_c.max(1e-300);
    GrowthReport {
        passed: worst <= 2.0 * denom,
        fitted_c,
        worst_inflation_ratio: worst / denom,
        worst_factor,
    }
}
