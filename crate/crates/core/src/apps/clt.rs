//! Out-of-sample error study: the asymptotic law of the robustly trained
//! optimizer. With `delta = 1/sqrt(N)` the rescaled deviation
//! `sqrt(N) (a*_{N, delta} - a*)` converges to `(hess_a V)^{-1} (H - Theta)`
//! where `H` is the M-estimator Gaussian and `Theta` the robust mean shift;
//! the study verifies the mean shift (and, scaled by `N`, the out-of-sample
//! error's quadratic form) over Monte Carlo replications.

use super::regression::{exact_sqrt_regression, RegressionData};
use super::AppError;
use crate::measures::{DiscreteMeasure, NormSpec};
use crate::problem::{self, LossModel};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Data-generating laws for the study.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplerSpec {
    /// Scalar Gaussian observations.
    GaussianScalar { mean: f64, sd: f64 },
    /// `y = <coefs, x> + eps` with standard normal covariates and
    /// `eps ~ N(0, noise_sd^2)`; sampled points are `(x, y)`.
    LinearModel { coefs: Vec<f64>, noise_sd: f64 },
}

impl SamplerSpec {
    pub fn dim(&self) -> usize {
        match self {
            SamplerSpec::GaussianScalar { .. } => 1,
            SamplerSpec::LinearModel { coefs, .. } => coefs.len() + 1,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match self {
            SamplerSpec::GaussianScalar { mean, sd } => {
                DVector::from_vec(vec![mean + sd * rng.sample::<f64, _>(StandardNormal)])
            }
            SamplerSpec::LinearModel { coefs, noise_sd } => {
                let k = coefs.len();
                let mut xy = Vec::with_capacity(k + 1);
                let mut y = noise_sd * rng.sample::<f64, _>(StandardNormal);
                for c in coefs {
                    let xi: f64 = rng.sample(StandardNormal);
                    y += c * xi;
                    xy.push(xi);
                }
                xy.push(y);
                DVector::from_vec(xy)
            }
        }
    }

    pub fn draw_measure(&self, n: usize, rng: &mut ChaCha8Rng) -> DiscreteMeasure {
        DiscreteMeasure::make_empirical((0..n).map(|_| self.sample(rng)).collect())
            .expect("n >= 1 samples")
    }

    pub fn draw_with_seed(&self, n: usize, seed: u64) -> DiscreteMeasure {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.draw_measure(n, &mut rng)
    }
}

/// Which loss the study trains robustly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CltLoss {
    /// `f(x, a) = (a - x)^2`; the robust optimizer has the closed form
    /// `a*_delta = mean` (the worst case inflates the value radially, which
    /// does not move the argmin).
    QuadraticTracking,
    /// Square-root regression with penalty exponent `s`; the robust
    /// optimizer is the exact square-root-regression solution.
    SqrtRegression { s: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CltStudyConfig {
    pub sampler: SamplerSpec,
    pub loss: CltLoss,
    /// Sample size per replication; the robust radius is `1/sqrt(N)`.
    pub n: usize,
    /// Number of replications.
    pub m: usize,
    pub seed: u64,
    /// Reference-sample size for the population-level predictions.
    pub reference_size: usize,
}

impl CltStudyConfig {
    pub fn validate(&self) -> Result<(), AppError> {
        if self.n == 0 || self.m == 0 {
            return Err(AppError::BadInput("need N >= 1 and M >= 1".into()));
        }
        match (&self.sampler, &self.loss) {
            (SamplerSpec::GaussianScalar { .. }, CltLoss::QuadraticTracking) => Ok(()),
            (SamplerSpec::LinearModel { .. }, CltLoss::SqrtRegression { s }) => {
                if *s >= 1.0 {
                    Ok(())
                } else {
                    Err(AppError::BadInput("penalty exponent must satisfy s >= 1".into()))
                }
            }
            _ => Err(AppError::BadInput(
                "sampler and loss kinds do not match (gaussian-scalar goes with \
                 quadratic-tracking, linear-model with sqrt-regression)"
                    .into(),
            )),
        }
    }
}

/// Monte Carlo report of the rescaled optimizer deviations and the
/// out-of-sample error, against the predicted asymptotics.
#[derive(Debug, Clone)]
pub struct CltReport {
    pub n: usize,
    pub m: usize,
    pub failures: usize,
    /// True (population) optimizer.
    pub a_true: DVector<f64>,
    /// Empirical mean of `sqrt(N) (a*_{N,1/sqrt(N)} - a_true)`.
    pub mean_scaled_deviation: DVector<f64>,
    /// Standard error of that mean.
    pub std_error: DVector<f64>,
    /// Predicted mean shift `-(hess_a V)^{-1} Theta`.
    pub predicted_shift: DVector<f64>,
    /// `(mean - predicted) / std_error`, componentwise.
    pub z_scores: DVector<f64>,
    /// Diagonal of the empirical covariance of the scaled deviations.
    pub empirical_cov_diag: DVector<f64>,
    /// Diagonal of the predicted covariance `(hess V)^{-1} Cov(grad_a f) (hess V)^{-1}`.
    pub predicted_cov_diag: DVector<f64>,
    /// Empirical mean of `N * (V(0, a*_{N,delta}) - V(0, a_true))` under the
    /// population law.
    pub oos_scaled_mean: f64,
    /// Predicted limit `(tr(A Sigma) + Theta' (hess V)^{-1} A (hess V)^{-1}... )`,
    /// i.e. `E[(H - Theta)' (2 hess V)^{-1} (H - Theta)]`.
    pub oos_predicted: f64,
    /// The mean-shift vector itself.
    pub theta: DVector<f64>,
}

impl CltReport {
    pub fn to_json(&self) -> serde_json::Value {
        let v = |x: &DVector<f64>| x.iter().copied().collect::<Vec<_>>();
        serde_json::json!({
            "n": self.n,
            "m": self.m,
            "failures": self.failures,
            "a_true": v(&self.a_true),
            "mean_scaled_deviation": v(&self.mean_scaled_deviation),
            "std_error": v(&self.std_error),
            "predicted_shift": v(&self.predicted_shift),
            "z_scores": v(&self.z_scores),
            "empirical_cov_diag": v(&self.empirical_cov_diag),
            "predicted_cov_diag": v(&self.predicted_cov_diag),
            "oos_scaled_mean": self.oos_scaled_mean,
            "oos_predicted": self.oos_predicted,
            "theta": v(&self.theta),
        })
    }
}

fn loss_and_norm(config: &CltStudyConfig) -> (LossModel, NormSpec, usize) {
    match &config.loss {
        CltLoss::QuadraticTracking => (
            problem::quadratic_tracking(),
            NormSpec::euclidean(2.0).expect("valid norm"),
            1,
        ),
        CltLoss::SqrtRegression { s } => {
            let k = config.sampler.dim() - 1;
            let norm = NormSpec::with_active(
                *s,
                2.0,
                crate::measures::ActiveCoords::Subset((0..k).collect()),
            )
            .expect("valid norm");
            (problem::sqrt_regression(k), norm, k)
        }
    }
}

fn true_optimizer(config: &CltStudyConfig) -> DVector<f64> {
    match (&config.sampler, &config.loss) {
        (SamplerSpec::GaussianScalar { mean, .. }, _) => DVector::from_vec(vec![*mean]),
        // Standard normal covariates: E[x x'] = I, so a* = E[y x] = coefs.
        (SamplerSpec::LinearModel { coefs, .. }, _) => DVector::from_column_slice(coefs),
    }
}

/// Non-robust empirical optimizer (closed forms).
fn fit(config: &CltStudyConfig, mu: &DiscreteMeasure) -> Result<DVector<f64>, AppError> {
    match &config.loss {
        CltLoss::QuadraticTracking => Ok(mu.mean()),
        CltLoss::SqrtRegression { .. } => {
            let k = config.sampler.dim() - 1;
            RegressionData::new(mu.clone(), k)?.ols()
        }
    }
}

/// Robust empirical optimizer at radius `delta` (closed forms per loss).
fn fit_robust(
    config: &CltStudyConfig,
    mu: &DiscreteMeasure,
    delta: f64,
) -> Result<DVector<f64>, AppError> {
    match &config.loss {
        // The worst case inflates (sqrt(V0(a)) + delta)^2, which is minimized
        // by the same action as V0: the mean.
        CltLoss::QuadraticTracking => Ok(mu.mean()),
        CltLoss::SqrtRegression { s } => {
            let k = config.sampler.dim() - 1;
            exact_sqrt_regression(&RegressionData::new(mu.clone(), k)?, *s, delta)
        }
    }
}

/// Run the study: draw `M` empirical measures of size `N`, robustly train at
/// `delta = 1/sqrt(N)`, and compare the rescaled deviations and out-of-sample
/// error against the predicted limit law.
pub fn clt_study(config: &CltStudyConfig) -> Result<CltReport, AppError> {
    config.validate()?;
    let (loss, norm, k) = loss_and_norm(config);
    let q = norm.q();
    let a_true = true_optimizer(config);

    // Population-level quantities from a large reference sample:
    // Theta, hess_a V, and Cov(grad_a f).
    let mut ref_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let reference = config
        .sampler
        .draw_measure(config.reference_size.max(1000), &mut ref_rng);
    let mass = reference.integrate(|x| norm.seminorm(&loss.grad_x(x, &a_true)).powf(q));
    let mut theta = DVector::<f64>::zeros(k);
    if mass > 0.0 {
        let pref = mass.powf(1.0 / q - 1.0);
        for (x, w) in reference.iter() {
            let g = loss.grad_x(x, &a_true);
            let gn = norm.seminorm(&g);
            if gn == 0.0 {
                continue;
            }
            theta += loss.grad_xa(x, &a_true) * norm.h_map(&g) * (gn.powf(q - 1.0) * w);
        }
        theta *= pref;
    }
    let mut hess = DMatrix::<f64>::zeros(k, k);
    let mut sigma_h = DMatrix::<f64>::zeros(k, k);
    for (x, w) in reference.iter() {
        hess += loss.hess_a(x, &a_true) * w;
        let ga = loss.grad_a(x, &a_true);
        sigma_h += &ga * ga.transpose() * w;
    }
    let hess_lu = hess.clone().lu();
    let predicted_shift = -hess_lu
        .solve(&theta)
        .ok_or_else(|| AppError::BadInput("hess_a V is singular at a_true".into()))?;
    let hess_inv = hess_lu
        .try_inverse()
        .ok_or_else(|| AppError::BadInput("hess_a V is singular at a_true".into()))?;
    let predicted_cov = &hess_inv * &sigma_h * &hess_inv;
    // E[(H - Theta)' (2 hess V)^{-1} (H - Theta)] with H ~ N(0, Sigma).
    let half_inv = &hess_inv * 0.5;
    let oos_predicted = (&half_inv * &sigma_h).trace() + theta.dot(&(&half_inv * &theta));

    // Replications, parallel with per-replication seeds, aggregated in index
    // order for determinism.
    let delta = 1.0 / (config.n as f64).sqrt();
    let sqrt_n = (config.n as f64).sqrt();
    let results: Vec<Option<(DVector<f64>, f64)>> = (0..config.m)
        .into_par_iter()
        .map(|rep| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1 + rep as u64));
            let mu_n = config.sampler.draw_measure(config.n, &mut rng);
            let _a_n = fit(config, &mu_n).ok()?;
            let a_robust = fit_robust(config, &mu_n, delta).ok()?;
            let dev = (&a_robust - &a_true) * sqrt_n;
            // Out-of-sample error under the population law, scaled by N.
            let oos = (reference.integrate(|x| loss.value(x, &a_robust))
                - reference.integrate(|x| loss.value(x, &a_true)))
                * config.n as f64;
            Some((dev, oos))
        })
        .collect();

    let mut failures = 0;
    let mut devs: Vec<DVector<f64>> = Vec::with_capacity(config.m);
    let mut oos_sum = 0.0;
    for r in results {
        match r {
            Some((dev, oos)) => {
                devs.push(dev);
                oos_sum += oos;
            }
            None => failures += 1,
        }
    }
    if devs.is_empty() {
        return Err(AppError::BadInput(
            "every replication failed; nothing to report".into(),
        ));
    }
    let m_ok = devs.len() as f64;
    let mut mean = DVector::<f64>::zeros(k);
    for d in &devs {
        mean += d;
    }
    mean /= m_ok;
    let mut cov_diag = DVector::<f64>::zeros(k);
    for d in &devs {
        for i in 0..k {
            let c = d[i] - mean[i];
            cov_diag[i] += c * c;
        }
    }
    cov_diag /= (m_ok - 1.0).max(1.0);
    let std_error = DVector::from_fn(k, |i, _| (cov_diag[i] / m_ok).sqrt());
    let z_scores = DVector::from_fn(k, |i, _| {
        (mean[i] - predicted_shift[i]) / std_error[i].max(1e-300)
    });

    Ok(CltReport {
        n: config.n,
        m: config.m,
        failures,
        a_true,
        mean_scaled_deviation: mean,
        std_error,
        predicted_shift,
        z_scores,
        empirical_cov_diag: cov_diag,
        predicted_cov_diag: DVector::from_fn(k, |i, _| predicted_cov[(i, i)]),
        oos_scaled_mean: oos_sum / m_ok,
        oos_predicted,
        theta,
    })
}
