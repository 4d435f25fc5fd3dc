//! The analytic first-order sensitivities of the robust value and optimizer:
//! `upsilon` (the value derivative at radius zero), `beth` (the optimizer
//! derivative), the positive-radius variant, and the linearly-constrained
//! variant with its martingale/covariance closed forms.

use crate::measures::{DiscreteMeasure, NormSpec};
use crate::optim;
use crate::problem::{ConstraintSet, LossModel, OptimizerCertificate};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error(
        "value sensitivity requires transport order p > 1 (got p = {0}); at p = 1 the robust \
         value can grow linearly even when the gradient formula returns 0, e.g. a quadratic \
         loss at a point mass has V(delta) = delta"
    )]
    OrderTooSmall(f64),
    #[error("at least one optimizer certificate is required")]
    NoOptimizers,
    #[error("optimizer is not stationary: |grad_a V(0,a)|_inf = {0:e}")]
    NotStationary(f64),
    #[error("hess_a V(0, a*) is numerically singular; eigenvalues {0:?}")]
    SingularHessian(Vec<f64>),
    #[error(
        "optimizer-sensitivity condition violated: atoms {atoms:?} have a vanishing state \
         gradient while the mixed derivative is nonzero elsewhere"
    )]
    AlternativeConditionViolated { atoms: Vec<usize> },
    #[error("measure is not calibrated to the constraints: |int Phi dmu|_inf = {0:e} > 1e-8")]
    NotCalibrated(f64),
    #[error(
        "degenerate constraints: min over unit multipliers of the gradient L^q mass is \
         {0:e}; drop linearly dependent constraints and retry"
    )]
    DegenerateConstraints(f64),
    #[error("no worst-case measures supplied")]
    EmptyWorstCaseList,
    #[error(
        "worst-case measure {index} is infeasible: W_p distance {distance} exceeds radius {radius}"
    )]
    InfeasibleWorstCase {
        index: usize,
        distance: f64,
        radius: f64,
    },
    #[error(
        "worst-case measure {index} does not attain the robust value: integral {integral} vs \
         V(r, a) = {value}"
    )]
    WorstCaseValueMismatch {
        index: usize,
        integral: f64,
        value: f64,
    },
    #[error("transport error while validating worst cases: {0}")]
    Transport(#[from] crate::measures::TransportError),
    #[error("oracle error while validating worst cases: {0}")]
    Oracle(#[from] Box<crate::oracle::OracleError>),
}

/// Named intermediate integrals behind a sensitivity value.
#[derive(Debug, Clone)]
pub struct Intermediates {
    /// `(int ||grad_x f||^q dmu)^{1/q}` at the minimizing action.
    pub grad_lq_norm: f64,
    /// `hess_a V(0, a*) = int hess_a f dmu` (optimizer sensitivity only).
    pub hess_a_v: Option<DMatrix<f64>>,
    /// Condition number of the Hessian above.
    pub hess_condition: Option<f64>,
    /// The numerator integral of the optimizer sensitivity.
    pub beth_numerator: Option<DVector<f64>>,
}

/// First-order sensitivity report.
#[derive(Debug, Clone)]
pub struct SensitivityReport {
    /// Value sensitivity; always nonnegative.
    pub upsilon: f64,
    /// Optimizer sensitivity, when computed.
    pub beth: Option<DVector<f64>>,
    /// Conjugate exponent `q = p/(p-1)`.
    pub q: f64,
    pub integrals: Intermediates,
    /// Optimal constraint multipliers, for constrained runs.
    pub lambda_star: Option<DVector<f64>>,
    /// The action at which the reported value was attained.
    pub a_star: DVector<f64>,
    /// Index into the supplied optimizer list that attained the minimum.
    pub minimizing_index: usize,
}

impl SensitivityReport {
    /// Header matching [`to_csv_row`](Self::to_csv_row) for an action
    /// dimension `k` and `m` constraint multipliers.
    pub fn csv_header(k: usize, m: usize) -> String {
        let mut cols = vec!["upsilon".to_string(), "q".to_string()];
        cols.extend((0..k).map(|i| format!("beth{i}")));
        cols.extend((0..k).map(|i| format!("a_star{i}")));
        cols.extend((0..m).map(|i| format!("lambda{i}")));
        cols.join(",")
    }

    /// One batch row with 17-significant-digit floats; absent blocks are
    /// left empty.
    pub fn to_csv_row(&self) -> String {
        let mut cols = vec![format!("{:.17e}", self.upsilon), format!("{:.17e}", self.q)];
        if let Some(b) = &self.beth {
            cols.extend(b.iter().map(|v| format!("{v:.17e}")));
        }
        cols.extend(self.a_star.iter().map(|v| format!("{v:.17e}")));
        if let Some(l) = &self.lambda_star {
            cols.extend(l.iter().map(|v| format!("{v:.17e}")));
        }
        cols.join(",")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "upsilon": self.upsilon,
            "beth": self.beth.as_ref().map(|b| b.iter().copied().collect::<Vec<_>>()),
            "q": self.q,
            "grad_lq_norm": self.integrals.grad_lq_norm,
            "hess_condition": self.integrals.hess_condition,
            "beth_numerator": self
                .integrals
                .beth_numerator
                .as_ref()
                .map(|v| v.iter().copied().collect::<Vec<_>>()),
            "lambda_star": self
                .lambda_star
                .as_ref()
                .map(|v| v.iter().copied().collect::<Vec<_>>()),
            "a_star": self.a_star.iter().copied().collect::<Vec<_>>(),
            "minimizing_index": self.minimizing_index,
        })
    }
}

fn require_order(norm: &NormSpec) -> Result<f64, SensitivityError> {
    if norm.p() <= 1.0 {
        return Err(SensitivityError::OrderTooSmall(norm.p()));
    }
    Ok(norm.q())
}

/// `int ||grad_x f(x, a)||^q dmu` (the unexponentiated integral).
pub fn grad_lq_mass(loss: &LossModel, mu: &DiscreteMeasure, norm: &NormSpec, a: &DVector<f64>) -> f64 {
    let q = norm.q();
    mu.integrate(|x| norm.seminorm(&loss.grad_x(x, a)).powf(q))
}

/// Value sensitivity `V'(0)`: the minimum over the supplied optimizers of the
/// `L^q(mu)` norm of `||grad_x f(., a*)||`.
pub fn upsilon(
    loss: &LossModel,
    mu: &DiscreteMeasure,
    norm: &NormSpec,
    optimizers: &[OptimizerCertificate],
) -> Result<SensitivityReport, SensitivityError> {
    let q = require_order(norm)?;
    if optimizers.is_empty() {
        return Err(SensitivityError::NoOptimizers);
    }
    let mut best = f64::INFINITY;
    let mut best_idx = 0;
    for (i, cert) in optimizers.iter().enumerate() {
        let mass = grad_lq_mass(loss, mu, norm, &cert.action);
        let value = mass.powf(1.0 / q);
        if value < best {
            best = value;
            best_idx = i;
        }
    }
    Ok(SensitivityReport {
        upsilon: best,
        beth: None,
        q,
        integrals: Intermediates {
            grad_lq_norm: best,
            hess_a_v: None,
            hess_condition: None,
            beth_numerator: None,
        },
        lambda_star: None,
        a_star: optimizers[best_idx].action.clone(),
        minimizing_index: best_idx,
    })
}

/// Condition-number cutoff for `hess_a V` inversion.
const HESS_COND_CUTOFF: f64 = 1e12;

/// Optimizer sensitivity `lim (a*_delta - a*)/delta`.
///
/// `beth = -(int ||g||^q dmu)^{1/q - 1} (hess_a V)^{-1} int M h(g) ||g||^{q-1} dmu`
/// with `g = grad_x f(x, a*)` and `M = grad_x grad_a f(x, a*)`; atoms with
/// `g = 0` contribute zero by an explicit guard (0/0 = 0 convention).
pub fn beth(
    loss: &LossModel,
    mu: &DiscreteMeasure,
    norm: &NormSpec,
    a_star: &OptimizerCertificate,
) -> Result<SensitivityReport, SensitivityError> {
    let q = require_order(norm)?;
    let a = &a_star.action;
    let k = loss.action_dim();

    // Stationarity of the supplied action under mu.
    let grad_v = mu.integrate_vec(k, |x| loss.grad_a(x, a));
    let residual = grad_v.amax();
    let scale = 1.0 + mu.integrate(|x| loss.value(x, a)).abs();
    if residual > 1e-5 * scale {
        return Err(SensitivityError::NotStationary(residual));
    }

    // hess_a V(0, a*) = int hess_a f dmu, inverted through a symmetric
    // eigendecomposition with a condition-number cutoff.
    let mut hess = DMatrix::<f64>::zeros(k, k);
    for (x, w) in mu.iter() {
        hess += loss.hess_a(x, a) * w;
    }
    let eig = nalgebra::SymmetricEigen::new(hess.clone());
    let eigs: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let max_abs = eigs.iter().fold(0.0_f64, |m, &e| m.max(e.abs()));
    let min_abs = eigs.iter().fold(f64::INFINITY, |m, &e| m.min(e.abs()));
    let cond = if min_abs > 0.0 {
        max_abs / min_abs
    } else {
        f64::INFINITY
    };
    if !(min_abs > 0.0) || cond > HESS_COND_CUTOFF {
        return Err(SensitivityError::SingularHessian(eigs));
    }

    // Alternative condition of the optimizer-sensitivity theorem:
    // grad_x f != 0 a.e., or the mixed derivative vanishes a.e.
    let mixed_scale: f64 = mu
        .iter()
        .map(|(x, w)| w * loss.grad_xa(x, a).amax())
        .sum();
    let zero_atoms: Vec<usize> = mu
        .atoms()
        .iter()
        .enumerate()
        .filter(|(_, x)| norm.seminorm(&loss.grad_x(x, a)) == 0.0)
        .map(|(i, _)| i)
        .collect();
    if !zero_atoms.is_empty() && mixed_scale > 1e-12 {
        return Err(SensitivityError::AlternativeConditionViolated { atoms: zero_atoms });
    }

    let mass = grad_lq_mass(loss, mu, norm, a);
    let mut numerator = DVector::<f64>::zeros(k);
    if mass > 0.0 {
        for (x, w) in mu.iter() {
            let g = loss.grad_x(x, a);
            let gn = norm.seminorm(&g);
            if gn == 0.0 {
                continue; // 0/0 = 0
            }
            let h = norm.h_map(&g);
            numerator += loss.grad_xa(x, a) * h * (gn.powf(q - 1.0) * w);
        }
    }
    let beth_vec = if mass > 0.0 {
        let prefactor = mass.powf(1.0 / q - 1.0);
        let rhs = &numerator * prefactor;
        // Solve hess * y = rhs through the eigendecomposition.
        let qmat = &eig.eigenvectors;
        let mut y = qmat.transpose() * rhs;
        for i in 0..k {
            y[i] /= eig.eigenvalues[i];
        }
        -(qmat * y)
    } else {
        DVector::zeros(k)
    };

    Ok(SensitivityReport {
        upsilon: mass.powf(1.0 / q),
        beth: Some(beth_vec),
        q,
        integrals: Intermediates {
            grad_lq_norm: mass.powf(1.0 / q),
            hess_a_v: Some(hess),
            hess_condition: Some(cond),
            beth_numerator: Some(numerator),
        },
        lambda_star: None,
        a_star: a.clone(),
        minimizing_index: 0,
    })
}

/// Value sensitivity at a positive radius `r`: the maximum over supplied
/// worst-case measures `nu in B*_r(mu, a*_r)` of the `L^q(nu)` gradient norm.
///
/// Each candidate is verified to lie in the radius-`r` ball (within
/// `r (1 + 1e-6)`) and to attain `V(r, a*_r)` within `tol`; the oracle
/// supplies the reference value. Note the oracle returns one maximizer while
/// the derivative takes a supremum over the whole attaining set; callers may
/// pass several candidates.
pub fn upsilon_at_r(
    loss: &LossModel,
    mu: &DiscreteMeasure,
    norm: &NormSpec,
    r: f64,
    a_star_r: &OptimizerCertificate,
    worst_cases: &[DiscreteMeasure],
    support: &crate::measures::SupportSpec,
    tol: f64,
) -> Result<f64, SensitivityError> {
    let q = require_order(norm)?;
    if r == 0.0 {
        let rep = upsilon(loss, mu, norm, std::slice::from_ref(a_star_r))?;
        return Ok(rep.upsilon);
    }
    if worst_cases.is_empty() {
        return Err(SensitivityError::EmptyWorstCaseList);
    }
    let cfg = crate::oracle::OracleConfig::default();
    let value_at_r = crate::oracle::eval_dual(
        loss,
        mu,
        norm,
        r,
        &a_star_r.action,
        support,
        &cfg,
    )
    .map_err(Box::new)?
    .value;
    let mut best = f64::NEG_INFINITY;
    for (index, nu) in worst_cases.iter().enumerate() {
        let distance = crate::measures::wasserstein_distance(mu, nu, norm)?;
        if distance > r * (1.0 + 1e-6) {
            return Err(SensitivityError::InfeasibleWorstCase {
                index,
                distance,
                radius: r,
            });
        }
        let integral = nu.integrate(|x| loss.value(x, &a_star_r.action));
        if (integral - value_at_r).abs() > tol * (1.0 + value_at_r.abs()) {
            return Err(SensitivityError::WorstCaseValueMismatch {
                index,
                integral,
                value: value_at_r,
            });
        }
        let mass = grad_lq_mass(loss, nu, norm, &a_star_r.action);
        best = best.max(mass.powf(1.0 / q));
    }
    Ok(best)
}

/// Constrained value sensitivity: `inf_lambda (int ||grad_x f + sum lambda_i
/// grad Phi_i||^q dmu)^{1/q}` under calibration `int Phi dmu = 0`.
///
/// The objective is an `L^q` norm of an affine map of `lambda`, hence convex;
/// it is minimized by golden-section search for one constraint and by
/// quasi-Newton descent with restarts otherwise (it can lose smoothness where
/// the integrand vanishes).
pub fn upsilon_constrained(
    loss: &LossModel,
    mu: &DiscreteMeasure,
    norm: &NormSpec,
    constraints: &ConstraintSet,
    a_star: &OptimizerCertificate,
) -> Result<SensitivityReport, SensitivityError> {
    let q = require_order(norm)?;
    let m = constraints.len();
    let calib = constraints.calibration_residual(mu);
    if calib > 1e-8 {
        return Err(SensitivityError::NotCalibrated(calib));
    }

    // Non-degeneracy over a sphere grid of multipliers.
    let min_sphere = min_constraint_mass_on_sphere(mu, norm, constraints, q);
    if min_sphere <= 1e-10 {
        return Err(SensitivityError::DegenerateConstraints(min_sphere));
    }

    let a = &a_star.action;
    // Pre-evaluate atom data once.
    let grads_f: Vec<DVector<f64>> = mu.atoms().iter().map(|x| loss.grad_x(x, a)).collect();
    let grads_phi: Vec<DMatrix<f64>> = mu.atoms().iter().map(|x| constraints.grad(x)).collect();
    let objective_mass = |lambda: &DVector<f64>| -> f64 {
        let mut acc = 0.0;
        for ((g, gp), &w) in grads_f.iter().zip(&grads_phi).zip(mu.weights()) {
            let shifted = g + gp.transpose() * lambda;
            acc += w * norm.seminorm(&shifted).powf(q);
        }
        acc
    };
    let objective = |lambda: &DVector<f64>| objective_mass(lambda).powf(1.0 / q);

    // Least-squares initializer (exact for q = 2 and a single martingale-type
    // constraint): minimize int |g + lambda' gp|^2.
    let mut lsq_a = DMatrix::<f64>::zeros(m, m);
    let mut lsq_b = DVector::<f64>::zeros(m);
    for ((g, gp), &w) in grads_f.iter().zip(&grads_phi).zip(mu.weights()) {
        lsq_a += gp * gp.transpose() * w;
        lsq_b += gp * g * w;
    }
    let lambda0 = lsq_a
        .clone()
        .lu()
        .solve(&(-&lsq_b))
        .unwrap_or_else(|| DVector::zeros(m));

    let (lambda_star, value) = if m == 1 {
        let f1 = |t: f64| objective(&DVector::from_vec(vec![t]));
        let center = lambda0[0];
        let mut radius = 1.0 + center.abs();
        // Expand the bracket until the midpoint beats both ends.
        for _ in 0..60 {
            if f1(center - radius) >= f1(center) && f1(center + radius) >= f1(center) {
                break;
            }
            radius *= 2.0;
        }
        let (t, v) = optim::golden_section(f1, center - radius, center + radius, 1e-12, 300);
        (DVector::from_vec(vec![t]), v)
    } else {
        let fg = |lam: &DVector<f64>| {
            let v = objective(lam);
            (v, crate::problem::fd_gradient(&objective, lam))
        };
        let mut best: Option<optim::BfgsResult> = None;
        let mut starts = vec![lambda0.clone(), DVector::zeros(m)];
        for i in 0..m {
            let mut e = DVector::zeros(m);
            e[i] = 1.0;
            starts.push(e.clone());
            starts.push(-e);
        }
        for s in &starts {
            let res = optim::bfgs(fg, s, 1e-10, 400);
            if best.as_ref().map_or(true, |b| res.value < b.value) {
                best = Some(res);
            }
        }
        let b = best.expect("at least one start");
        (b.x, b.value)
    };

    Ok(SensitivityReport {
        upsilon: value,
        beth: None,
        q,
        integrals: Intermediates {
            grad_lq_norm: value,
            hess_a_v: None,
            hess_condition: None,
            beth_numerator: None,
        },
        lambda_star: Some(lambda_star),
        a_star: a.clone(),
        minimizing_index: 0,
    })
}

fn min_constraint_mass_on_sphere(
    mu: &DiscreteMeasure,
    norm: &NormSpec,
    constraints: &ConstraintSet,
    q: f64,
) -> f64 {
    let m = constraints.len();
    let mass = |lambda: &DVector<f64>| -> f64 {
        mu.integrate(|x| {
            let combo = constraints.grad(x).transpose() * lambda;
            norm.seminorm(&combo).powf(q)
        })
    };
    let mut min = f64::INFINITY;
    if m == 1 {
        for t in [-1.0, 1.0] {
            min = min.min(mass(&DVector::from_vec(vec![t])));
        }
        return min;
    }
    // Exact collinearity shows up as a null direction of the Euclidean Gram
    // matrix G = int (grad Phi)(grad Phi)^T dmu; since all norms on the atom
    // set are equivalent, a (near-)null eigenvalue of G forces the sphere
    // infimum to (near) zero for every q. The sphere grid refines the bound
    // in the q-specific norm.
    let mut gram = DMatrix::<f64>::zeros(m, m);
    for (x, w) in mu.iter() {
        let g = constraints.grad(x);
        gram += &g * g.transpose() * w;
    }
    let eig = nalgebra::SymmetricEigen::new(gram);
    let min_eig = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &e| a.min(e));
    if min_eig <= 1e-10 {
        let null_dir = eig
            .eigenvectors
            .column(eig.eigenvalues.imin())
            .clone_owned();
        return mass(&null_dir).min(min_eig.max(0.0));
    }
    for i in 0..m {
        let mut e = DVector::zeros(m);
        e[i] = 1.0;
        min = min.min(mass(&e));
        min = min.min(mass(&(-e)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_5b8e);
    for _ in 0..256 {
        let mut v = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let n = v.norm();
        if n > 0.0 {
            v /= n;
            min = min.min(mass(&v));
        }
    }
    min
}

/// Martingale closed form (single constraint `x - x0` on R^1, `p = q = 2`):
/// the standard deviation of `grad_x f(., a*)` under `mu`, along with the
/// optimal multiplier `-E[grad_x f]`.
pub fn martingale_closed_form(
    loss: &LossModel,
    mu: &DiscreteMeasure,
    a_star: &DVector<f64>,
) -> (f64, f64) {
    let mean = mu.integrate(|x| loss.grad_x(x, a_star)[0]);
    let var = mu.integrate(|x| {
        let g = loss.grad_x(x, a_star)[0];
        (g - mean) * (g - mean)
    });
    (var.sqrt(), -mean)
}

/// Covariance closed form (single constraint `x1 x2 - b` on R^2, `p = q = 2`):
/// the gradient's second moment reduced by its projection onto `(x2, x1)`.
pub fn covariance_closed_form(
    loss: &LossModel,
    mu: &DiscreteMeasure,
    a_star: &DVector<f64>,
) -> (f64, f64) {
    let sq = mu.integrate(|x| loss.grad_x(x, a_star).norm_squared());
    let cross = mu.integrate(|x| {
        let g = loss.grad_x(x, a_star);
        g[0] * x[1] + g[1] * x[0]
    });
    let xsq = mu.integrate(|x| x.norm_squared());
    let lambda = -cross / xsq;
    ((sq - cross * cross / xsq).max(0.0).sqrt(), lambda)
}

/// First-order value approximation `V(0) + upsilon * delta`.
pub fn first_order_value(v0: f64, ups: f64, delta: f64) -> f64 {
    v0 + ups * delta
}

/// First-order optimizer approximation `a* + beth * delta`.
pub fn first_order_optimizer(
    a_star: &DVector<f64>,
    beth: &DVector<f64>,
    delta: f64,
) -> DVector<f64> {
    a_star + beth * delta
}
