//! Built-in loss catalog with full analytic derivative stacks.
//!
//! Catalog ids and parameters (JSON):
//!
//! * `"linear"` — `f(x,a) = <c,x> + a^2/2`, params `{"c": [..]}`. The
//!   quadratic action term makes the base problem well posed without
//!   affecting any state derivative.
//! * `"quadratic-tracking"` — `f(x,a) = (a - x)^2`, `d = k = 1`, no params.
//! * `"oce"` — optimized certainty equivalent `f(x,a) = l(g(x) - a) + a`,
//!   params `{"l": "quad"|"exp", "g": {...}}`. `l = "exp"` grows faster than
//!   any polynomial; robust (dual) evaluation then needs a compact support.
//! * `"hedging"` — `f(x,a) = l(g(x) + <a, x - x0>)`, params `{"l", "g", "x0"}`.
//! * `"oce-hedging"` — `f(x,(H,m)) = l(g(x) + <H, x - x0> + m) - m`,
//!   params as `"hedging"`; the action is `(H, m)` with `k = d + 1`.
//! * `"sqrt-regression"` — `f((x,y),a) = (y - <x,a>)^2` on `R^{k+1}`,
//!   params `{"k": n}` (features first, label last).
//! * `"call-smooth"` — softplus-smoothed call `beta^{-1} log(1+exp(beta(s0 x - strike)))
//!   + a^2/2`, params `{"s0", "strike", "beta"}`.
//! * `"call"` — `(s0 x - strike)^+`, action ignored; the state gradient is the
//!   weak derivative `s0 1{s0 x >= strike}` (boundary included).
//! * `"quadratic-decision"` — `f(x,a) = a^2/2 - g(x) a`, params `{"g": {...}}`.

use super::{LossModel, ProblemError};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Convex scalar transforms used by the OCE/hedging losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LSpec {
    /// `l(y) = y` (risk neutral; the action drops out of the OCE loss).
    Linear,
    /// `l(y) = y + y^2/2` (bounded below by -1/2, quadratic growth).
    Quad,
    /// `l(y) = exp(y)` (entropic; super-polynomial growth).
    Exp,
}

impl LSpec {
    pub fn l(&self, y: f64) -> f64 {
        match self {
            LSpec::Linear => y,
            LSpec::Quad => y + 0.5 * y * y,
            LSpec::Exp => y.exp(),
        }
    }

    pub fn dl(&self, y: f64) -> f64 {
        match self {
            LSpec::Linear => 1.0,
            LSpec::Quad => 1.0 + y,
            LSpec::Exp => y.exp(),
        }
    }

    pub fn d2l(&self, y: f64) -> f64 {
        match self {
            LSpec::Linear => 0.0,
            LSpec::Quad => 1.0,
            LSpec::Exp => y.exp(),
        }
    }
}

/// Payoff maps `g: R^d -> R` with gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GSpec {
    /// `g(x) = x` on R^1.
    Identity,
    /// `g(x) = <w, x>`.
    Linear { w: Vec<f64> },
}

impl GSpec {
    pub fn dim(&self) -> usize {
        match self {
            GSpec::Identity => 1,
            GSpec::Linear { w } => w.len(),
        }
    }

    pub fn g(&self, x: &DVector<f64>) -> f64 {
        match self {
            GSpec::Identity => x[0],
            GSpec::Linear { w } => w.iter().zip(x.iter()).map(|(a, b)| a * b).sum(),
        }
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            GSpec::Identity => DVector::from_vec(vec![1.0]),
            GSpec::Linear { w } => {
                let _ = x;
                DVector::from_column_slice(w)
            }
        }
    }
}

pub fn catalog_ids() -> &'static [&'static str] {
    &[
        "linear",
        "quadratic-tracking",
        "oce",
        "hedging",
        "oce-hedging",
        "sqrt-regression",
        "call-smooth",
        "call",
        "quadratic-decision",
    ]
}

fn bad_params(id: &str, e: impl std::fmt::Display) -> ProblemError {
    ProblemError::BadParams {
        id: id.to_string(),
        message: e.to_string(),
    }
}

/// Instantiate a catalog loss from its id and JSON params.
pub fn builtin_loss(id: &str, params: &serde_json::Value) -> Result<LossModel, ProblemError> {
    match id {
        "linear" => {
            #[derive(Deserialize)]
            struct P {
                c: Vec<f64>,
            }
            let p: P = serde_json::from_value(params.clone()).map_err(|e| bad_params(id, e))?;
            if p.c.is_empty() {
                return Err(bad_params(id, "c must be nonempty"));
            }
            Ok(linear_loss(&p.c))
        }
        "quadratic-tracking" => Ok(quadratic_tracking()),
        "oce" => {
            #[derive(Deserialize)]
            struct P {
                l: LSpec,
                g: GSpec,
            }
            let p: P = serde_json::from_value(params.clone()).map_err(|e| bad_params(id, e))?;
            Ok(oce_loss(p.l, p.g))
        }
        "hedging" => {
            let p: HedgeParams =
                serde_json::from_value(params.clone()).map_err(|e| bad_params(id, e))?;
            if p.x0.len() != p.g.dim() {
                return Err(bad_params(id, "x0 dimension must match g"));
            }
            Ok(hedging_loss(p.l, p.g, DVector::from_column_slice(&p.x0)))
        }
        "oce-hedging" => {
            let p: HedgeParams =
                serde_json::from_value(params.clone()).map_err(|e| bad_params(id, e))?;
            if p.x0.len() != p.g.dim() {
                return Err(bad_params(id, "x0 dimension must match g"));
            }
            Ok(oce_hedging_loss(p.l, p.g, DVector::from_column_slice(&p.x0)))
        }
        "sqrt-regression" => {
            #[derive(Deserialize)]
            struct P {
                k: usize,
            }
            let p: P = serde_json::from_value(params.clone()).map_err(|e| bad_params(id, e))?;
            if p.k == 0 {
                return Err(bad_params(id, "k must be positive"));
            }
            Ok(sqrt_regression(p.k))
        }
        "call-smooth" => {
            #[derive(Deserialize)]
            struct P {
                s0: f64,
                strike: f64,
                beta: f64,
            }
            let p: P = serde_json::from_value(params.clone()).map_err(|e| bad_params(id, e))?;
            if p.beta <= 0.0 || p.s0 <= 0.0 {
                return Err(bad_params(id, "s0 and beta must be positive"));
            }
            Ok(smooth_call(p.s0, p.strike, p.beta))
        }
        "call" => {
            #[derive(Deserialize)]
            struct P {
                s0: f64,
                strike: f64,
            }
            let p: P = serde_json::from_value(params.clone()).map_err(|e| bad_params(id, e))?;
            Ok(call_payoff(p.s0, p.strike))
        }
        "quadratic-decision" => {
            #[derive(Deserialize)]
            struct P {
                g: GSpec,
            }
            let p: P = serde_json::from_value(params.clone()).map_err(|e| bad_params(id, e))?;
            Ok(quadratic_decision(p.g))
        }
        _ => Err(ProblemError::UnknownLoss {
            id: id.to_string(),
            catalog: catalog_ids().join(", "),
        }),
    }
}

#[derive(Deserialize)]
struct HedgeParams {
    l: LSpec,
    g: GSpec,
    x0: Vec<f64>,
}

pub fn linear_loss(c: &[f64]) -> LossModel {
    let d = c.len();
    let cv = DVector::from_column_slice(c);
    let c1 = cv.clone();
    let c2 = cv.clone();
    LossModel::new(
        "linear",
        d,
        1,
        2.0,
        Arc::new(move |x: &DVector<f64>, a: &DVector<f64>| c1.dot(x) + 0.5 * a[0] * a[0]),
    )
    .with_grad_x(Arc::new(move |_, _| c2.clone()))
    .with_grad_a(Arc::new(|_, a| DVector::from_vec(vec![a[0]])))
    .with_grad_xa(Arc::new(move |x: &DVector<f64>, _| {
        DMatrix::zeros(1, x.len())
    }))
    .with_hess_a(Arc::new(|_, _| DMatrix::from_element(1, 1, 1.0)))
}

pub fn quadratic_tracking() -> LossModel {
    LossModel::new(
        "quadratic-tracking",
        1,
        1,
        2.0,
        Arc::new(|x: &DVector<f64>, a: &DVector<f64>| (a[0] - x[0]).powi(2)),
    )
    .with_grad_x(Arc::new(|x, a| {
        DVector::from_vec(vec![2.0 * (x[0] - a[0])])
    }))
    .with_grad_a(Arc::new(|x, a| {
        DVector::from_vec(vec![2.0 * (a[0] - x[0])])
    }))
    .with_grad_xa(Arc::new(|_, _| DMatrix::from_element(1, 1, -2.0)))
    .with_hess_a(Arc::new(|_, _| DMatrix::from_element(1, 1, 2.0)))
}

pub fn oce_loss(l: LSpec, g: GSpec) -> LossModel {
    let d = g.dim();
    let (g1, g2, g3, g4, g5) = (g.clone(), g.clone(), g.clone(), g.clone(), g);
    LossModel::new(
        "oce",
        d,
        1,
        2.0,
        Arc::new(move |x: &DVector<f64>, a: &DVector<f64>| l.l(g1.g(x) - a[0]) + a[0]),
    )
    .with_grad_x(Arc::new(move |x, a| g2.grad(x) * l.dl(g2.g(x) - a[0])))
    .with_grad_a(Arc::new(move |x, a| {
        DVector::from_vec(vec![1.0 - l.dl(g3.g(x) - a[0])])
    }))
    .with_grad_xa(Arc::new(move |x, a| {
        let gr = g4.grad(x) * (-l.d2l(g4.g(x) - a[0]));
        DMatrix::from_fn(1, x.len(), |_, j| gr[j])
    }))
    .with_hess_a(Arc::new(move |x, a| {
        DMatrix::from_element(1, 1, l.d2l(g5.g(x) - a[0]))
    }))
}

pub fn hedging_loss(l: LSpec, g: GSpec, x0: DVector<f64>) -> LossModel {
    let d = g.dim();
    let (g1, g2, g3, g4, g5) = (g.clone(), g.clone(), g.clone(), g.clone(), g);
    let (x01, x02, x03, x04, x05) = (x0.clone(), x0.clone(), x0.clone(), x0.clone(), x0);
    let arg = move |gs: &GSpec, x0: &DVector<f64>, x: &DVector<f64>, a: &DVector<f64>| {
        gs.g(x) + a.dot(&(x - x0))
    };
    LossModel::new(
        "hedging",
        d,
        d,
        2.0,
        Arc::new(move |x: &DVector<f64>, a: &DVector<f64>| l.l(arg(&g1, &x01, x, a))),
    )
    .with_grad_x(Arc::new(move |x, a| {
        let t = g2.g(x) + a.dot(&(x - &x02));
        (g2.grad(x) + a) * l.dl(t)
    }))
    .with_grad_a(Arc::new(move |x, a| {
        let t = g3.g(x) + a.dot(&(x - &x03));
        (x - &x03) * l.dl(t)
    }))
    .with_grad_xa(Arc::new(move |x, a| {
        // d/dx [ (x - x0) l'(t) ] = l'(t) I + l''(t) (x - x0) (grad g + a)^T
        let t = g4.g(x) + a.dot(&(x - &x04));
        let outer = (x - &x04) * (g4.grad(x) + a).transpose();
        DMatrix::identity(x.len(), x.len()) * l.dl(t) + outer * l.d2l(t)
    }))
    .with_hess_a(Arc::new(move |x, a| {
        let t = g5.g(x) + a.dot(&(x - &x05));
        let dx = x - &x05;
        &dx * dx.transpose() * l.d2l(t)
    }))
}

pub fn oce_hedging_loss(l: LSpec, g: GSpec, x0: DVector<f64>) -> LossModel {
    let d = g.dim();
    let k = d + 1; // action (H, m)
    let (g1, g2, g3, g4, g5) = (g.clone(), g.clone(), g.clone(), g.clone(), g);
    let (x01, x02, x03, x04, x05) = (x0.clone(), x0.clone(), x0.clone(), x0.clone(), x0);
    let arg = move |gs: &GSpec, x0: &DVector<f64>, x: &DVector<f64>, a: &DVector<f64>| {
        let h = a.rows(0, x.len());
        gs.g(x) + h.dot(&(x - x0)) + a[x.len()]
    };
    LossModel::new(
        "oce-hedging",
        d,
        k,
        2.0,
        Arc::new(move |x: &DVector<f64>, a: &DVector<f64>| {
            l.l(arg(&g1, &x01, x, a)) - a[x.len()]
        }),
    )
    .with_grad_x(Arc::new(move |x, a| {
        let t = arg(&g2, &x02, x, a);
        (g2.grad(x) + a.rows(0, x.len()).clone_owned()) * l.dl(t)
    }))
    .with_grad_a(Arc::new(move |x, a| {
        let t = arg(&g3, &x03, x, a);
        let mut out = DVector::zeros(x.len() + 1);
        let dx = x - &x03;
        for i in 0..x.len() {
            out[i] = dx[i] * l.dl(t);
        }
        out[x.len()] = l.dl(t) - 1.0;
        out
    }))
    .with_grad_xa(Arc::new(move |x, a| {
        let t = arg(&g4, &x04, x, a);
        let dgdx = g4.grad(x) + a.rows(0, x.len()).clone_owned();
        let mut m = DMatrix::zeros(x.len() + 1, x.len());
        let dx = x - &x04;
        for i in 0..x.len() {
            for j in 0..x.len() {
                let id = if i == j { 1.0 } else { 0.0 };
                m[(i, j)] = l.dl(t) * id + l.d2l(t) * dx[i] * dgdx[j];
            }
        }
        for j in 0..x.len() {
            m[(x.len(), j)] = l.d2l(t) * dgdx[j];
        }
        m
    }))
    .with_hess_a(Arc::new(move |x, a| {
        let t = arg(&g5, &x05, x, a);
        let mut z = DVector::zeros(x.len() + 1);
        let dx = x - &x05;
        for i in 0..x.len() {
            z[i] = dx[i];
        }
        z[x.len()] = 1.0;
        &z * z.transpose() * l.d2l(t)
    }))
}

/// `f((x, y), a) = (y - <x, a>)^2` with states `(x, y)` in `R^{k+1}`.
pub fn sqrt_regression(k: usize) -> LossModel {
    let d = k + 1;
    let residual = move |x: &DVector<f64>, a: &DVector<f64>| {
        let feats = x.rows(0, k);
        x[k] - feats.dot(a)
    };
    LossModel::new(
        "sqrt-regression",
        d,
        k,
        2.0,
        Arc::new(move |x: &DVector<f64>, a: &DVector<f64>| residual(x, a).powi(2)),
    )
    .with_grad_x(Arc::new(move |x, a| {
        let e = residual(x, a);
        let mut g = DVector::zeros(k + 1);
        for i in 0..k {
            g[i] = -2.0 * e * a[i];
        }
        g[k] = 2.0 * e;
        g
    }))
    .with_grad_a(Arc::new(move |x, a| {
        let e = residual(x, a);
        let mut g = DVector::zeros(k);
        for i in 0..k {
            g[i] = -2.0 * e * x[i];
        }
        g
    }))
    .with_grad_xa(Arc::new(move |x, a| {
        // d/d(x,y) of grad_a f: row i is -2 [ -a_j x_i + e delta_ij | x_i ]
        let e = residual(x, a);
        let mut m = DMatrix::zeros(k, k + 1);
        for i in 0..k {
            for j in 0..k {
                let id = if i == j { 1.0 } else { 0.0 };
                m[(i, j)] = 2.0 * x[i] * a[j] - 2.0 * e * id;
            }
            m[(i, k)] = -2.0 * x[i];
        }
        m
    }))
    .with_hess_a(Arc::new(move |x, _| {
        let feats = x.rows(0, k).clone_owned();
        &feats * feats.transpose() * 2.0
    }))
}

/// Softplus-smoothed call payoff plus a separable action regularizer.
pub fn smooth_call(s0: f64, strike: f64, beta: f64) -> LossModel {
    let sp = move |t: f64| {
        // log(1 + exp(beta t)) / beta, overflow-safe
        if beta * t > 30.0 {
            t
        } else {
            (beta * t).exp().ln_1p() / beta
        }
    };
    let sig = move |t: f64| 1.0 / (1.0 + (-beta * t).exp());
    LossModel::new(
        "call-smooth",
        1,
        1,
        2.0,
        Arc::new(move |x: &DVector<f64>, a: &DVector<f64>| {
            sp(s0 * x[0] - strike) + 0.5 * a[0] * a[0]
        }),
    )
    .with_grad_x(Arc::new(move |x, _| {
        DVector::from_vec(vec![s0 * sig(s0 * x[0] - strike)])
    }))
    .with_grad_a(Arc::new(|_, a| DVector::from_vec(vec![a[0]])))
    .with_grad_xa(Arc::new(|_, _| DMatrix::zeros(1, 1)))
    .with_hess_a(Arc::new(|_, _| DMatrix::from_element(1, 1, 1.0)))
}

/// Plain call payoff `(s0 x - strike)^+`; the action is ignored. The state
/// gradient is the weak derivative with the boundary point included.
pub fn call_payoff(s0: f64, strike: f64) -> LossModel {
    LossModel::new(
        "call",
        1,
        1,
        2.0,
        Arc::new(move |x: &DVector<f64>, _: &DVector<f64>| (s0 * x[0] - strike).max(0.0)),
    )
    .with_grad_x(Arc::new(move |x, _| {
        DVector::from_vec(vec![if s0 * x[0] >= strike { s0 } else { 0.0 }])
    }))
    .with_grad_a(Arc::new(|_, _| DVector::zeros(1)))
    .with_grad_xa(Arc::new(|_, _| DMatrix::zeros(1, 1)))
    .with_hess_a(Arc::new(|_, _| DMatrix::zeros(1, 1)))
    .with_weak_gradient()
}

/// `f(x, a) = a^2/2 - g(x) a`.
pub fn quadratic_decision(g: GSpec) -> LossModel {
    let d = g.dim();
    let (g1, g2, g3, g4) = (g.clone(), g.clone(), g.clone(), g);
    LossModel::new(
        "quadratic-decision",
        d,
        1,
        2.0,
        Arc::new(move |x: &DVector<f64>, a: &DVector<f64>| 0.5 * a[0] * a[0] - g1.g(x) * a[0]),
    )
    .with_grad_x(Arc::new(move |x, a| g2.grad(x) * (-a[0])))
    .with_grad_a(Arc::new(move |x, a| {
        DVector::from_vec(vec![a[0] - g3.g(x)])
    }))
    .with_grad_xa(Arc::new(move |x, _| {
        let gr = g4.grad(x);
        DMatrix::from_fn(1, x.len(), |_, j| -gr[j])
    }))
    .with_hess_a(Arc::new(|_, _| DMatrix::from_element(1, 1, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_point(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
        DVector::from_fn(dim, |_, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn unknown_id_lists_catalog() {
        let err = builtin_loss("no-such-loss", &serde_json::json!({})).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("quadratic-tracking") && msg.contains("sqrt-regression"));
    }

    #[test]
    fn catalog_examples_evaluate() {
        let q = builtin_loss("quadratic-tracking", &serde_json::json!({})).unwrap();
        assert_eq!((q.state_dim(), q.action_dim()), (1, 1));
        let x = DVector::from_vec(vec![1.0]);
        let a = DVector::from_vec(vec![3.0]);
        assert_eq!(q.value(&x, &a), 4.0);

        let r = builtin_loss("sqrt-regression", &serde_json::json!({"k": 10})).unwrap();
        assert_eq!((r.state_dim(), r.action_dim()), (11, 10));

        let oce = builtin_loss(
            "oce",
            &serde_json::json!({"l": "exp", "g": {"kind": "identity"}}),
        )
        .unwrap();
        // f(x, a) = e^{x-a} + a
        let x = DVector::from_vec(vec![0.7]);
        let a = DVector::from_vec(vec![0.2]);
        assert!((oce.value(&x, &a) - ((0.5_f64).exp() + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn every_analytic_stack_matches_finite_differences_on_100_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let models = vec![
            builtin_loss("linear", &serde_json::json!({"c": [1.5, -0.7]})).unwrap(),
            builtin_loss("quadratic-tracking", &serde_json::json!({})).unwrap(),
            builtin_loss(
                "oce",
                &serde_json::json!({"l": "quad", "g": {"kind": "identity"}}),
            )
            .unwrap(),
            builtin_loss(
                "oce",
                &serde_json::json!({"l": "exp", "g": {"kind": "linear", "w": [0.5, -1.0]}}),
            )
            .unwrap(),
            builtin_loss(
                "hedging",
                &serde_json::json!({"l": "quad", "g": {"kind": "linear", "w": [1.0, 1.0]}, "x0": [1.0, 1.0]}),
            )
            .unwrap(),
            builtin_loss(
                "oce-hedging",
                &serde_json::json!({"l": "quad", "g": {"kind": "linear", "w": [1.0, 0.5]}, "x0": [1.0, 1.0]}),
            )
            .unwrap(),
            builtin_loss("sqrt-regression", &serde_json::json!({"k": 3})).unwrap(),
            builtin_loss(
                "call-smooth",
                &serde_json::json!({"s0": 1.0, "strike": 1.1, "beta": 10.0}),
            )
            .unwrap(),
            builtin_loss(
                "quadratic-decision",
                &serde_json::json!({"g": {"kind": "identity"}}),
            )
            .unwrap(),
        ];
        for m in &models {
            assert!(m.has_analytic_stack(), "{} missing derivatives", m.name());
            for _ in 0..100 {
                let x = random_point(&mut rng, m.state_dim());
                let a = random_point(&mut rng, m.action_dim());
                m.check_derivatives_at(&x, &a)
                    .unwrap_or_else(|e| panic!("{}: {e}", m.name()));
            }
        }
    }

    #[test]
    fn call_weak_gradient_includes_boundary() {
        let call = builtin_loss("call", &serde_json::json!({"s0": 1.0, "strike": 1.1})).unwrap();
        let a = DVector::zeros(1);
        assert_eq!(call.grad_x(&DVector::from_vec(vec![1.1]), &a)[0], 1.0);
        assert_eq!(call.grad_x(&DVector::from_vec(vec![1.0]), &a)[0], 0.0);
        assert_eq!(call.grad_x(&DVector::from_vec(vec![1.5]), &a)[0], 1.0);
    }
}
