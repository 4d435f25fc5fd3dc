//! Loss models `f(x, a)` with their derivative stack, linear constraint
//! functions, and the non-robust base problem solver.
//!
//! Derivative conventions (all dense, small dimensions):
//! `grad_x f` is `d x 1`, `grad_a f` is `k x 1`, `grad_x grad_a f` is `k x d`
//! (row `i` differentiates `grad_{a_i} f` in `x`), `hess_a f` is `k x k`.

mod catalog;
mod solve;

pub use catalog::{
    builtin_loss, call_payoff, catalog_ids, hedging_loss, linear_loss, oce_hedging_loss,
    oce_loss, quadratic_decision, quadratic_tracking, smooth_call, sqrt_regression, GSpec, LSpec,
};
pub use solve::{check_growth, solve_base_problem, GrowthReport, SolveConfig, SolveError};

use nalgebra::{DMatrix, DVector};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

pub type ScalarFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;
pub type VecFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown loss id {id:?}; catalog: {catalog}")]
    UnknownLoss { id: String, catalog: String },
    #[error("bad parameters for loss {id:?}: {message}")]
    BadParams { id: String, message: String },
    #[error(
        "analytic {which} disagrees with central finite differences at x={x:?}, a={a:?}: \
         analytic {analytic}, numeric {numeric}"
    )]
    DerivativeMismatch {
        which: &'static str,
        x: Vec<f64>,
        a: Vec<f64>,
        analytic: f64,
        numeric: f64,
    },
}

/// A loss `f(x, a)` on states `x` in R^d and actions `a` in R^k, together
/// with whatever part of its derivative stack is available analytically.
/// Missing derivatives fall back to adaptive central finite differences.
///
/// Evaluators must be pure and reentrant; models are shared across threads.
#[derive(Clone)]
pub struct LossModel {
    name: String,
    state_dim: usize,
    action_dim: usize,
    growth_exponent: f64,
    value: ScalarFn,
    grad_x: Option<VecFn>,
    grad_a: Option<VecFn>,
    grad_xa: Option<MatFn>,
    hess_a: Option<MatFn>,
    /// False when `grad_x` is a weak derivative (the loss has kinks in `x`);
    /// finite-difference cross-checks are skipped near the kink set.
    smooth_in_x: bool,
}

impl fmt::Debug for LossModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LossModel")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("action_dim", &self.action_dim)
            .field("growth_exponent", &self.growth_exponent)
            .field("analytic_grad_x", &self.grad_x.is_some())
            .field("analytic_grad_a", &self.grad_a.is_some())
            .field("analytic_grad_xa", &self.grad_xa.is_some())
            .field("analytic_hess_a", &self.hess_a.is_some())
            .field("smooth_in_x", &self.smooth_in_x)
            .finish()
    }
}

impl LossModel {
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        action_dim: usize,
        growth_exponent: f64,
        value: ScalarFn,
    ) -> Self {
        LossModel {
            name: name.into(),
            state_dim,
            action_dim,
            growth_exponent,
            value,
            grad_x: None,
            grad_a: None,
            grad_xa: None,
            hess_a: None,
            smooth_in_x: true,
        }
    }

    pub fn with_grad_x(mut self, g: VecFn) -> Self {
        self.grad_x = Some(g);
        self
    }

    pub fn with_grad_a(mut self, g: VecFn) -> Self {
        self.grad_a = Some(g);
        self
    }

    pub fn with_grad_xa(mut self, g: MatFn) -> Self {
        self.grad_xa = Some(g);
        self
    }

    pub fn with_hess_a(mut self, g: MatFn) -> Self {
        self.hess_a = Some(g);
        self
    }

    pub fn with_weak_gradient(mut self) -> Self {
        self.smooth_in_x = false;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// The growth exponent `p`: `|grad_x f| <= c (1 + |x|^{p-1})` is assumed.
    pub fn growth_exponent(&self) -> f64 {
        self.growth_exponent
    }

    pub fn smooth_in_x(&self) -> bool {
        self.smooth_in_x
    }

    pub fn value(&self, x: &DVector<f64>, a: &DVector<f64>) -> f64 {
        (self.value)(x, a)
    }

    pub fn grad_x(&self, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        match &self.grad_x {
            Some(g) => g(x, a),
            None => fd_gradient(|y| (self.value)(y, a), x),
        }
    }

    pub fn grad_a(&self, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        match &self.grad_a {
            Some(g) => g(x, a),
            None => fd_gradient(|b| (self.value)(x, b), a),
        }
    }

    /// `k x d` matrix of `d/dx grad_a f`.
    pub fn grad_xa(&self, x: &DVector<f64>, a: &DVector<f64>) -> DMatrix<f64> {
        match &self.grad_xa {
            Some(g) => g(x, a),
            None => fd_jacobian(|y| self.grad_a(y, a), x, self.action_dim),
        }
    }

    /// `k x k` Hessian of `f` in the action.
    pub fn hess_a(&self, x: &DVector<f64>, a: &DVector<f64>) -> DMatrix<f64> {
        match &self.hess_a {
            Some(g) => g(x, a),
            None => {
                let j = fd_jacobian(|b| self.grad_a(x, b), a, self.action_dim);
                // Symmetrize: FD noise breaks exact symmetry.
                (&j + j.transpose()) * 0.5
            }
        }
    }

    pub fn has_analytic_stack(&self) -> bool {
        self.grad_x.is_some()
            && self.grad_a.is_some()
            && self.grad_xa.is_some()
            && self.hess_a.is_some()
    }

    /// Compare every analytic derivative against central finite differences
    /// at the given point, within `max(1e-6, 1e-4 * magnitude)`.
    pub fn check_derivatives_at(
        &self,
        x: &DVector<f64>,
        a: &DVector<f64>,
    ) -> Result<(), ProblemError> {
        let close = |analytic: f64, numeric: f64| {
            (analytic - numeric).abs() <= (1e-6_f64).max(1e-4 * analytic.abs().max(numeric.abs()))
        };
        let mismatch = |which, analytic, numeric| ProblemError::DerivativeMismatch {
            which,
            x: x.iter().copied().collect(),
            a: a.iter().copied().collect(),
            analytic,
            numeric,
        };
        if self.grad_x.is_some() && self.smooth_in_x {
            let ga = self.grad_x(x, a);
            let gn = fd_gradient(|y| (self.value)(y, a), x);
            for i in 0..self.state_dim {
                if !close(ga[i], gn[i]) {
                    return Err(mismatch("grad_x", ga[i], gn[i]));
                }
            }
        }
        if self.grad_a.is_some() {
            let ga = self.grad_a(x, a);
            let gn = fd_gradient(|b| (self.value)(x, b), a);
            for i in 0..self.action_dim {
                if !close(ga[i], gn[i]) {
                    return Err(mismatch("grad_a", ga[i], gn[i]));
                }
            }
        }
        if self.grad_xa.is_some() && self.smooth_in_x {
            let ma = self.grad_xa(x, a);
            let mn = fd_jacobian(|y| self.grad_a(y, a), x, self.action_dim);
            for i in 0..self.action_dim {
                for j in 0..self.state_dim {
                    if !close(ma[(i, j)], mn[(i, j)]) {
                        return Err(mismatch("grad_xa", ma[(i, j)], mn[(i, j)]));
                    }
                }
            }
        }
        if self.hess_a.is_some() {
            let ma = self.hess_a(x, a);
            let mn = fd_jacobian(|b| self.grad_a(x, b), a, self.action_dim);
            for i in 0..self.action_dim {
                for j in 0..self.action_dim {
                    if !close(ma[(i, j)], mn[(i, j)]) {
                        return Err(mismatch("hess_a", ma[(i, j)], mn[(i, j)]));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Central finite-difference gradient with step `1e-5 * (1 + |coordinate|)`.
pub fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = 1e-5 * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central finite-difference Jacobian of a vector map, `out_dim x x.len()`.
pub fn fd_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: F,
    x: &DVector<f64>,
    out_dim: usize,
) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(out_dim, x.len());
    let mut xp = x.clone();
    for c in 0..x.len() {
        let h = 1e-5 * (1.0 + x[c].abs());
        xp[c] = x[c] + h;
        let fp = f(&xp);
        xp[c] = x[c] - h;
        let fm = f(&xp);
        xp[c] = x[c];
        for r in 0..out_dim {
            j[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    j
}

/// Where an optimizer came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertificateSource {
    Supplied,
    Solved,
}

/// An action together with its stationarity residual `|grad_a V(0, a)|_inf`.
#[derive(Debug, Clone)]
pub struct OptimizerCertificate {
    pub action: DVector<f64>,
    pub residual: f64,
    pub value: f64,
    pub source: CertificateSource,
}

impl OptimizerCertificate {
    pub fn supplied(action: DVector<f64>) -> Self {
        OptimizerCertificate {
            action,
            residual: f64::NAN,
            value: f64::NAN,
            source: CertificateSource::Supplied,
        }
    }
}

/// Scalar constraint function `Phi_i(x)` with its gradient.
#[derive(Clone)]
pub struct ConstraintFn {
    pub name: String,
    pub value: Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
    pub grad: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
}

/// A family `Phi = (Phi_1, ..., Phi_m)` of calibration constraints
/// `int Phi_i dnu = 0` imposed on the measures in the transport ball.
#[derive(Clone)]
pub struct ConstraintSet {
    constraints: Vec<ConstraintFn>,
}

impl fmt::Debug for ConstraintSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.constraints.iter().map(|c| c.name.as_str()).collect();
        f.debug_struct("ConstraintSet").field("phis", &names).finish()
    }
}

impl ConstraintSet {
    pub fn new(constraints: Vec<ConstraintFn>) -> Self {
        ConstraintSet { constraints }
    }

    /// Barycentre-preservation constraints `Phi_i(x) = x_i - x0_i`.
    pub fn martingale(x0: DVector<f64>) -> Self {
        let d = x0.len();
        let constraints = (0..d)
            .map(|i| {
                let x0i = x0[i];
                ConstraintFn {
                    name: format!("martingale[{i}]"),
                    value: Arc::new(move |x: &DVector<f64>| x[i] - x0i),
                    grad: Arc::new(move |x: &DVector<f64>| {
                        let mut g = DVector::zeros(x.len());
                        g[i] = 1.0;
                        g
                    }),
                }
            })
            .collect();
        ConstraintSet { constraints }
    }

    /// `Phi_1(x) = x_1 x_2 - b` on R^2.
    pub fn covariance(b: f64) -> Self {
        ConstraintSet {
            constraints: vec![ConstraintFn {
                name: "covariance".into(),
                value: Arc::new(move |x: &DVector<f64>| x[0] * x[1] - b),
                grad: Arc::new(|x: &DVector<f64>| DVector::from_vec(vec![x[1], x[0]])),
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn constraints(&self) -> &[ConstraintFn] {
        &self.constraints
    }

    pub fn value(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| (self.constraints[i].value)(x))
    }

    /// Gradients stacked as rows: `m x d`.
    pub fn grad(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let d = x.len();
        let mut g = DMatrix::zeros(self.len(), d);
        for (i, c) in self.constraints.iter().enumerate() {
            g.set_row(i, &(c.grad)(x).transpose());
        }
        g
    }

    /// `|int Phi dmu|_inf`, the calibration residual.
    pub fn calibration_residual(&self, mu: &crate::measures::DiscreteMeasure) -> f64 {
        let mut worst = 0.0_f64;
        for c in &self.constraints {
            let v = mu.integrate(|x| (c.value)(x));
            worst = worst.max(v.abs());
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_model() -> LossModel {
        // f(x, a) = (a - x)^2 in d = k = 1, full analytic stack.
        LossModel::new(
            "test-quadratic",
            1,
            1,
            2.0,
            Arc::new(|x: &DVector<f64>, a: &DVector<f64>| (a[0] - x[0]).powi(2)),
        )
        .with_grad_x(Arc::new(|x, a| DVector::from_vec(vec![2.0 * (x[0] - a[0])])))
        .with_grad_a(Arc::new(|x, a| DVector::from_vec(vec![2.0 * (a[0] - x[0])])))
        .with_grad_xa(Arc::new(|_, _| DMatrix::from_element(1, 1, -2.0)))
        .with_hess_a(Arc::new(|_, _| DMatrix::from_element(1, 1, 2.0)))
    }

    #[test]
    fn analytic_stack_matches_finite_differences() {
        let m = quadratic_model();
        let x = DVector::from_vec(vec![0.7]);
        let a = DVector::from_vec(vec![-1.2]);
        m.check_derivatives_at(&x, &a).unwrap();
    }

    #[test]
    fn fd_fallback_matches_analytic() {
        let m = quadratic_model();
        let bare = LossModel::new(
            "bare",
            1,
            1,
            2.0,
            Arc::new(|x: &DVector<f64>, a: &DVector<f64>| (a[0] - x[0]).powi(2)),
        );
        let x = DVector::from_vec(vec![0.3]);
        let a = DVector::from_vec(vec![2.0]);
        assert!((bare.grad_x(&x, &a)[0] - m.grad_x(&x, &a)[0]).abs() < 1e-8);
        assert!((bare.grad_a(&x, &a)[0] - m.grad_a(&x, &a)[0]).abs() < 1e-8);
        assert!((bare.grad_xa(&x, &a)[(0, 0)] + 2.0).abs() < 1e-6);
        assert!((bare.hess_a(&x, &a)[(0, 0)] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn martingale_constraints_calibrate_at_mean() {
        let mu = crate::measures::DiscreteMeasure::uniform_scalars(&[0.0, 2.0]).unwrap();
        let cs = ConstraintSet::martingale(DVector::from_vec(vec![1.0]));
        assert!(cs.calibration_residual(&mu) < 1e-15);
        let off = ConstraintSet::martingale(DVector::from_vec(vec![0.5]));
        assert!((off.calibration_residual(&mu) - 0.5).abs() < 1e-15);
    }
}
