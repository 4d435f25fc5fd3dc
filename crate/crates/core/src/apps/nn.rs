//! A robustness metric for one-hidden-layer neural networks: the first-order
//! sensitivity of the training loss to adversarial data perturbations,
//! `(int |grad_{(x,y)} f|^q dmu)^{1/q}` at the trained parameters, with the
//! gradient computed by backpropagation.

use super::AppError;
use crate::measures::{DiscreteMeasure, NormSpec};
use crate::problem::LossModel;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Activation functions. Only smooth choices are admitted: the sensitivity
/// theory needs a differentiable loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NnActivation {
    Tanh,
    /// Identity activation, which reduces the network to a linear model.
    Identity,
}

impl NnActivation {
    /// Reject non-smooth activations by name.
    pub fn parse(name: &str) -> Result<Self, AppError> {
        match name {
            "tanh" => Ok(NnActivation::Tanh),
            "identity" | "linear" => Ok(NnActivation::Identity),
            "relu" | "leaky-relu" | "hardtanh" => Err(AppError::BadInput(format!(
                "activation {name:?} is not differentiable; use a smooth surrogate such as tanh"
            ))),
            other => Err(AppError::BadInput(format!("unknown activation {other:?}"))),
        }
    }

    fn apply(&self, t: f64) -> f64 {
        match self {
            NnActivation::Tanh => t.tanh(),
            NnActivation::Identity => t,
        }
    }

    fn deriv(&self, t: f64) -> f64 {
        match self {
            NnActivation::Tanh => {
                let th = t.tanh();
                1.0 - th * th
            }
            NnActivation::Identity => 1.0,
        }
    }
}

/// Parameters of a one-hidden-layer network `x -> A2 sigma(A1 x + b1) + b2`.
#[derive(Debug, Clone)]
pub struct NnParams {
    pub a1: DMatrix<f64>, // hidden x d_in
    pub b1: DVector<f64>, // hidden
    pub a2: DMatrix<f64>, // d_out x hidden
    pub b2: DVector<f64>, // d_out
}

impl NnParams {
    pub fn hidden(&self) -> usize {
        self.a1.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.a1.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.a2.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.a1.len() + self.b1.len() + self.a2.len() + self.b2.len()
    }

    pub fn flatten(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend(self.a1.transpose().iter()); // row-major A1
        v.extend(self.b1.iter());
        v.extend(self.a2.transpose().iter()); // row-major A2
        v.extend(self.b2.iter());
        DVector::from_vec(v)
    }

    pub fn unflatten(theta: &DVector<f64>, hidden: usize, d_in: usize, d_out: usize) -> Self {
        let mut at = theta.iter().copied();
        let a1 = DMatrix::from_fn(hidden, d_in, |_, _| 0.0);
        let mut a1 = a1;
        for r in 0..hidden {
            for c in 0..d_in {
                a1[(r, c)] = at.next().expect("theta too short");
            }
        }
        let b1 = DVector::from_fn(hidden, |_, _| at.next().expect("theta too short"));
        let mut a2 = DMatrix::zeros(d_out, hidden);
        for r in 0..d_out {
            for c in 0..hidden {
                a2[(r, c)] = at.next().expect("theta too short");
            }
        }
        let b2 = DVector::from_fn(d_out, |_, _| at.next().expect("theta too short"));
        NnParams { a1, b1, a2, b2 }
    }

    pub fn forward(&self, act: NnActivation, x: &DVector<f64>) -> DVector<f64> {
        let pre = &self.a1 * x + &self.b1;
        let hidden = pre.map(|t| act.apply(t));
        &self.a2 * hidden + &self.b2
    }
}

/// The robustness metric: `(int |grad_{(x,y)} f|^q dmu)^{1/q}` for the loss
/// `f((x, y)) = |y - net(x)|^p_loss` at fixed parameters.
pub fn nn_robustness(
    params: &NnParams,
    activation: NnActivation,
    data: &DiscreteMeasure,
    norm: &NormSpec,
    p_loss: f64,
) -> Result<f64, AppError> {
    let q = norm.q();
    if !q.is_finite() {
        return Err(AppError::BadInput(
            "the robustness metric needs transport order p > 1".into(),
        ));
    }
    if p_loss < 2.0 {
        return Err(AppError::BadInput(
            "loss exponent below 2 is not twice differentiable at zero residual".into(),
        ));
    }
    let d_in = params.d_in();
    let d_out = params.d_out();
    if data.dim() != d_in + d_out {
        return Err(AppError::BadInput(format!(
            "data dimension {} does not match network in+out {}",
            data.dim(),
            d_in + d_out
        )));
    }
    let mass = data.integrate(|xy| {
        let g = grad_xy(params, activation, xy, p_loss);
        norm.seminorm(&g).powf(q)
    });
    Ok(mass.powf(1.0 / q))
}

/// Backprop the loss gradient in `(x, y)` at fixed parameters.
fn grad_xy(params: &NnParams, act: NnActivation, xy: &DVector<f64>, p_loss: f64) -> DVector<f64> {
    let d_in = params.d_in();
    let d_out = params.d_out();
    let x = xy.rows(0, d_in).clone_owned();
    let y = xy.rows(d_in, d_out).clone_owned();
    let pre = &params.a1 * &x + &params.b1;
    let hidden = pre.map(|t| act.apply(t));
    let out = &params.a2 * &hidden + &params.b2;
    let r = &y - &out;
    let rn = r.norm();
    // grad_r |r|^p = p |r|^{p-2} r (zero at r = 0 for p >= 2).
    let grad_r = if rn == 0.0 {
        DVector::zeros(d_out)
    } else {
        &r * (p_loss * rn.powf(p_loss - 2.0))
    };
    // d r / d x = -A2 diag(sigma') A1; d r / d y = I.
    let sig_prime = pre.map(|t| act.deriv(t));
    let back_hidden = params.a2.transpose() * &grad_r; // hidden
    let back_pre = DVector::from_fn(params.hidden(), |i, _| back_hidden[i] * sig_prime[i]);
    let grad_x = -(params.a1.transpose() * back_pre);
    let mut g = DVector::zeros(d_in + d_out);
    for i in 0..d_in {
        g[i] = grad_x[i];
    }
    for j in 0..d_out {
        g[d_in + j] = grad_r[j];
    }
    g
}

/// Wrap the network training loss `f((x,y), theta) = |y - net_theta(x)|^p`
/// as a [`LossModel`] over the flattened parameter vector, for driving the
/// robust-training oracle.
pub fn nn_loss_model(
    hidden: usize,
    d_in: usize,
    d_out: usize,
    activation: NnActivation,
    p_loss: f64,
) -> LossModel {
    let d = d_in + d_out;
    let k = hidden * d_in + hidden + d_out * hidden + d_out;
    let value = {
        move |xy: &DVector<f64>, theta: &DVector<f64>| {
            let params = NnParams::unflatten(theta, hidden, d_in, d_out);
            let x = xy.rows(0, d_in).clone_owned();
            let y = xy.rows(d_in, d_out).clone_owned();
            let r = y - params.forward(activation, &x);
            r.norm().powf(p_loss)
        }
    };
    let gx = {
        move |xy: &DVector<f64>, theta: &DVector<f64>| {
            let params = NnParams::unflatten(theta, hidden, d_in, d_out);
            grad_xy(&params, activation, xy, p_loss)
        }
    };
    let ga = {
        move |xy: &DVector<f64>, theta: &DVector<f64>| {
            let params = NnParams::unflatten(theta, hidden, d_in, d_out);
            let x = xy.rows(0, d_in).clone_owned();
            let y = xy.rows(d_in, d_out).clone_owned();
            let pre = &params.a1 * &x + &params.b1;
            let hid = pre.map(|t| activation.apply(t));
            let out = &params.a2 * &hid + &params.b2;
            let r = &y - &out;
            let rn = r.norm();
            let grad_out = if rn == 0.0 {
                DVector::zeros(d_out)
            } else {
                // d |r|^p / d out = -p |r|^{p-2} r
                -(&r * (p_loss * rn.powf(p_loss - 2.0)))
            };
            let sig_prime = pre.map(|t| activation.deriv(t));
            let back_hidden = params.a2.transpose() * &grad_out;
            let back_pre =
                DVector::from_fn(hidden, |i, _| back_hidden[i] * sig_prime[i]);
            let mut g = Vec::with_capacity(k);
            for i in 0..hidden {
                for j in 0..d_in {
                    g.push(back_pre[i] * x[j]); // dA1[i][j]
                }
            }
            g.extend(back_pre.iter()); // db1
            for i in 0..d_out {
                for j in 0..hidden {
                    g.push(grad_out[i] * hid[j]); // dA2[i][j]
                }
            }
            g.extend(grad_out.iter()); // db2
            DVector::from_vec(g)
        }
    };
    LossModel::new("nn-training-loss", d, k, p_loss.max(2.0), Arc::new(value))
        .with_grad_x(Arc::new(gx))
        .with_grad_a(Arc::new(ga))
}
