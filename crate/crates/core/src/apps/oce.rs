//! Optimized certainty equivalents: closed-form value and optimizer
//! sensitivities for `f(x, a) = l(g(x) - a) + a`, the loss-minimizing hedging
//! variant, and the exact average-value-at-risk sensitivity.

use super::AppError;
use crate::measures::{DiscreteMeasure, NormSpec};
use crate::problem::{self, GSpec, LSpec, OptimizerCertificate, SolveConfig};
use crate::sensitivity::{Intermediates, SensitivityReport};
use nalgebra::DVector;

/// An OCE risk problem: convex transform `l` of the payoff `g`.
#[derive(Debug, Clone)]
pub struct OceProblem {
    pub l: LSpec,
    pub g: GSpec,
}

/// Value and (for `q = 2`) optimizer sensitivity of the OCE problem, using
/// the dedicated integrand `l'(g(x) - a*) grad g(x)`:
///
/// * `upsilon = (int |l'(g - a*) grad g|^q dmu)^{1/q}`,
/// * `beth = (int |l' grad g|^2 dmu)^{-1/2} int l'' l' |grad g|^2 dmu / int l'' dmu`.
///
/// For `q != 2` the optimizer sensitivity falls back to the general formula.
pub fn oce_sensitivities(
    problem: &OceProblem,
    mu: &DiscreteMeasure,
    norm: &NormSpec,
) -> Result<SensitivityReport, AppError> {
    let loss = problem::oce_loss(problem.l, problem.g.clone());
    let cert = problem::solve_base_problem(&loss, mu, &DVector::zeros(1), &SolveConfig::default())?;
    let a = cert.action[0];
    let q = norm.q();
    if !q.is_finite() {
        return Err(AppError::BadInput(
            "OCE sensitivities need transport order p > 1".into(),
        ));
    }
    let l = problem.l;
    let g = &problem.g;
    let mass = mu.integrate(|x| {
        let integrand = g.grad(x) * l.dl(g.g(x) - a);
        norm.seminorm(&integrand).powf(q)
    });
    let upsilon = mass.powf(1.0 / q);

    let d2_mass = mu.integrate(|x| l.d2l(g.g(x) - a));
    if d2_mass.abs() < 1e-14 {
        // A vanishing denominator is only benign when the numerator vanishes
        // identically (risk-neutral l: both carry an l'' factor).
        let numerator_vanishes = mu
            .iter()
            .all(|(x, _)| l.d2l(g.g(x) - a).abs() < 1e-14);
        if !numerator_vanishes {
            return Err(AppError::BadInput(
                "OCE optimizer sensitivity is undefined: int l'' dmu = 0".into(),
            ));
        }
        return Ok(SensitivityReport {
            upsilon,
            beth: Some(DVector::zeros(1)),
            q,
            integrals: Intermediates {
                grad_lq_norm: upsilon,
                hess_a_v: Some(nalgebra::DMatrix::zeros(1, 1)),
                hess_condition: None,
                beth_numerator: Some(DVector::zeros(1)),
            },
            lambda_star: None,
            a_star: cert.action.clone(),
            minimizing_index: 0,
        });
    }
    let beth = if (q - 2.0).abs() < 1e-12 {
        let numer = mu.integrate(|x| {
            let gx = g.g(x) - a;
            l.d2l(gx) * l.dl(gx) * g.grad(x).norm_squared()
        });
        DVector::from_vec(vec![mass.sqrt().recip() * numer / d2_mass])
    } else {
        crate::sensitivity::beth(&loss, mu, norm, &cert)?
            .beth
            .expect("beth requested")
    };
    Ok(SensitivityReport {
        upsilon,
        beth: Some(beth),
        q,
        integrals: Intermediates {
            grad_lq_norm: upsilon,
            hess_a_v: Some(nalgebra::DMatrix::from_element(1, 1, d2_mass)),
            hess_condition: Some(1.0),
            beth_numerator: None,
        },
        lambda_star: None,
        a_star: cert.action.clone(),
        minimizing_index: 0,
    })
}

/// Value sensitivity of the loss-minimizing hedge
/// `f(x, a) = l(g(x) + <a, x - x0>)`:
/// `(int | l'(g + <a*, x - x0>) (grad g + a*) |^q dmu)^{1/q}`.
pub fn hedging_upsilon(
    l: LSpec,
    g: &GSpec,
    x0: &DVector<f64>,
    mu: &DiscreteMeasure,
    norm: &NormSpec,
    a_star: &OptimizerCertificate,
) -> Result<f64, AppError> {
    let q = norm.q();
    if !q.is_finite() {
        return Err(AppError::BadInput(
            "hedging sensitivity needs transport order p > 1".into(),
        ));
    }
    let a = &a_star.action;
    let mass = mu.integrate(|x| {
        let t = g.g(x) + a.dot(&(x - x0));
        let integrand = (g.grad(x) + a) * l.dl(t);
        norm.seminorm(&integrand).powf(q)
    });
    Ok(mass.powf(1.0 / q))
}

/// Exact average-value-at-risk sensitivity `|z*| / alpha^{1/p}`.
///
/// Exposed only through this closed form (the weak-derivative route): the
/// positive-part kink violates the smoothness the generic machinery assumes.
/// The first-order expansion is exact in delta for `p = 1, 2`.
pub fn avar_upsilon(z_star: &DVector<f64>, alpha: f64, p: f64) -> Result<f64, AppError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AppError::BadInput(format!(
            "average value at risk level must lie in (0,1), got {alpha}"
        )));
    }
    if p < 1.0 {
        return Err(AppError::BadInput(format!(
            "transport order must satisfy p >= 1, got {p}"
        )));
    }
    Ok(z_star.norm() / alpha.powf(1.0 / p))
}
