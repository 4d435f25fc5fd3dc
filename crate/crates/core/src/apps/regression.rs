//! Square-root LASSO / Ridge shrinkage: the first-order coefficient
//! approximation `a*_delta ~ a* - sqrt(V(0)) D^{-1} h(a*) delta` and the exact
//! convex solver for `min_a sqrt(E(y - <a,x>)^2) + delta |a|_s` it is
//! validated against.

use super::AppError;
use crate::measures::{ActiveCoords, DiscreteMeasure, NormSpec};
use nalgebra::{DMatrix, DVector};

/// Regression data: a measure on `R^{k+1}` (features first, label last).
#[derive(Debug, Clone)]
pub struct RegressionData {
    mu: DiscreteMeasure,
    k: usize,
}

impl RegressionData {
    pub fn new(mu: DiscreteMeasure, k: usize) -> Result<Self, AppError> {
        if mu.dim() != k + 1 {
            return Err(AppError::BadInput(format!(
                "expected measure on R^{} for {} features, got dimension {}",
                k + 1,
                k,
                mu.dim()
            )));
        }
        Ok(RegressionData { mu, k })
    }

    pub fn measure(&self) -> &DiscreteMeasure {
        &self.mu
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Second-moment matrix `D = E[x x^T]`.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.k, self.k);
        for (xy, w) in self.mu.iter() {
            let x = xy.rows(0, self.k);
            for i in 0..self.k {
                for j in 0..self.k {
                    d[(i, j)] += w * x[i] * x[j];
                }
            }
        }
        d
    }

    pub fn cross_moment(&self) -> DVector<f64> {
        let mut b = DVector::zeros(self.k);
        for (xy, w) in self.mu.iter() {
            for i in 0..self.k {
                b[i] += w * xy[i] * xy[self.k];
            }
        }
        b
    }

    pub fn label_second_moment(&self) -> f64 {
        self.mu.integrate(|xy| xy[self.k] * xy[self.k])
    }

    /// Residual second moment `E (y - <a, x>)^2`.
    pub fn v0(&self, a: &DVector<f64>) -> f64 {
        self.mu.integrate(|xy| {
            let e = xy[self.k] - xy.rows(0, self.k).dot(a);
            e * e
        })
    }

    /// Ordinary least squares `a* = D^{-1} E[y x]`.
    pub fn ols(&self) -> Result<DVector<f64>, AppError> {
        let d = self.design_matrix();
        d.lu()
            .solve(&self.cross_moment())
            .ok_or_else(|| AppError::BadInput("design matrix D = E[xx^T] is singular".into()))
    }

    /// The seminorm paired with this data: `l^s` on the feature block only.
    pub fn feature_norm(&self, s: f64, p: f64) -> NormSpec {
        NormSpec::with_active(s, p, ActiveCoords::Subset((0..self.k).collect()))
            .expect("feature block is a valid active set")
    }
}

/// First-order shrinkage: returns `(a*, a* - sqrt(V0) D^{-1} h_s(a*) delta)`.
///
/// For `s = 1` the direction map `h = sign` is discontinuous at zero
/// components; following the theory's side condition, a zero OLS coefficient
/// is an error rather than a silent subgradient choice.
pub fn sqrt_regression_shrinkage(
    data: &RegressionData,
    s: f64,
    delta: f64,
) -> Result<(DVector<f64>, DVector<f64>), AppError> {
    let a_star = data.ols()?;
    let v0 = data.v0(&a_star);
    let norm = NormSpec::new(s, 2.0)?;
    if s == 1.0 && a_star.iter().any(|c| *c == 0.0) {
        return Err(AppError::BadInput(
            "s = 1 shrinkage needs every OLS coefficient nonzero (sign(0) is ambiguous)".into(),
        ));
    }
    let (h, warned) = norm.h_map_flagged(&a_star);
    if warned {
        return Err(AppError::BadInput(
            "s = 1 shrinkage needs every OLS coefficient nonzero (sign(0) is ambiguous)".into(),
        ));
    }
    let d = data.design_matrix();
    let dinv_h = d
        .lu()
        .solve(&h)
        .ok_or_else(|| AppError::BadInput("design matrix D = E[xx^T] is singular".into()))?;
    let shifted = &a_star - dinv_h * (v0.sqrt() * delta);
    Ok((a_star, shifted))
}

/// Exact minimizer of the convex objective `sqrt(E (y - <a,x>)^2) + delta |a|_s`
/// by proximal gradient descent (FISTA for `s = 1`, where the penalty is
/// nonsmooth at coordinate zeros).
pub fn exact_sqrt_regression(
    data: &RegressionData,
    s: f64,
    delta: f64,
) -> Result<DVector<f64>, AppError> {
    if delta == 0.0 {
        return data.ols();
    }
    let d = data.design_matrix();
    let b = data.cross_moment();
    let ysq = data.label_second_moment();
    let k = data.k;
    // Smooth part g(a) = sqrt(a' D a - 2 b' a + ysq); gradient (Da - b)/g.
    let v0 = |a: &DVector<f64>| (a.dot(&(&d * a)) - 2.0 * b.dot(a) + ysq).max(0.0);
    let g = |a: &DVector<f64>| v0(a).sqrt();
    let grad_g = |a: &DVector<f64>| {
        let gv = g(a);
        if gv <= 1e-14 {
            DVector::zeros(k)
        } else {
            (&d * a - &b) / gv
        }
    };
    let norm_s = NormSpec::new(s, 2.0)?;
    let penalty = |a: &DVector<f64>| delta * norm_s.seminorm(a);
    let objective = |a: &DVector<f64>| g(a) + penalty(a);

    let mut a = data.ols()?;
    // FISTA with backtracking; the prox of delta |.|_1 is soft thresholding,
    // while for s > 1 the penalty is smooth away from 0 and a plain gradient
    // step on the full objective suffices.
    if s == 1.0 {
        let mut y = a.clone();
        let mut t = 1.0_f64;
        let mut step = 1.0;
        for _ in 0..50_000 {
            let gy = grad_g(&y);
            // Backtracking on the smooth part majorization.
            let mut accepted = false;
            let mut candidate = a.clone();
            for _ in 0..60 {
                let z = &y - &gy * step;
                candidate = DVector::from_fn(k, |i, _| soft_threshold(z[i], delta * step));
                let lhs = g(&candidate);
                let dz = &candidate - &y;
                let rhs = g(&y) + gy.dot(&dz) + dz.norm_squared() / (2.0 * step);
                if lhs <= rhs + 1e-15 {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let momentum = (t - 1.0) / t_next;
            let prev = std::mem::replace(&mut a, candidate);
            y = &a + (&a - &prev) * momentum;
            t = t_next;
            step *= 1.3;
            // Prox-gradient residual check at the current point.
            let ga = grad_g(&a);
            let za = &a - &ga * step;
            let pa = DVector::from_fn(k, |i, _| soft_threshold(za[i], delta * step));
            if (&pa - &a).amax() <= 1e-12 * (1.0 + a.amax()) {
                break;
            }
        }
        // The all-zero vector is a kink candidate the iteration can stall at.
        if objective(&DVector::zeros(k)) < objective(&a) {
            a = DVector::zeros(k);
        }
        Ok(a)
    } else {
        let fg = |x: &DVector<f64>| {
            let val = objective(x);
            let mut grad = grad_g(x);
            let sn = norm_s.seminorm(x);
            if sn > 0.0 {
                grad += norm_s.h_map(x) * delta;
            }
            (val, grad)
        };
        let res = crate::optim::bfgs(fg, &a, 1e-11, 2000);
        let mut out = res.x;
        if objective(&DVector::zeros(k)) < objective(&out) {
            out = DVector::zeros(k);
        }
        if !res.converged && res.grad_norm > 1e-6 {
            return Err(AppError::BadInput(format!(
                "square-root regression solver stalled at gradient norm {:e}",
                res.grad_norm
            )));
        }
        Ok(out)
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn synth(seed: u64, n: usize, coefs: &[f64], noise: f64) -> RegressionData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = coefs.len();
        let rows = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..k)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                let y: f64 = x.iter().zip(coefs).map(|(a, b)| a * b).sum::<f64>()
                    + noise * rng.sample::<f64, _>(rand_distr::StandardNormal);
                let mut xy = x;
                xy.push(y);
                DVector::from_vec(xy)
            })
            .collect();
        RegressionData::new(DiscreteMeasure::make_empirical(rows).unwrap(), k).unwrap()
    }

    /// Orthonormal-design data: X^T X = I exactly (QR of a random matrix),
    /// labels centered.
    fn orthonormal(seed: u64, n: usize, k: usize) -> (RegressionData, DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let x = raw.qr().q();
        let coefs = DVector::from_fn(k, |i, _| 0.5 + i as f64 * 0.3);
        let mut y = &x * &coefs;
        for v in y.iter_mut() {
            *v += 0.4 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let mean = y.mean();
        for v in y.iter_mut() {
            *v -= mean;
        }
        let rows: Vec<DVector<f64>> = (0..n)
            .map(|i| {
                let mut xy: Vec<f64> = (0..k).map(|j| x[(i, j)]).collect();
                xy.push(y[i]);
                DVector::from_vec(xy)
            })
            .collect();
        (
            RegressionData::new(DiscreteMeasure::make_empirical(rows).unwrap(), k).unwrap(),
            x,
            y,
        )
    }

    #[test]
    fn zero_delta_recovers_ols() {
        let data = synth(1, 50, &[1.0, -2.0], 0.3);
        let ols = data.ols().unwrap();
        let exact = exact_sqrt_regression(&data, 1.0, 0.0).unwrap();
        assert!((exact - ols).amax() < 1e-12);
    }

    #[test]
    fn huge_delta_shrinks_to_zero_under_l1() {
        let data = synth(2, 50, &[0.8, -0.4], 0.3);
        let a = exact_sqrt_regression(&data, 1.0, 50.0).unwrap();
        assert_eq!(a.amax(), 0.0);
        // And the objective at zero indeed beats the OLS point.
        let ols = data.ols().unwrap();
        let obj = |a: &DVector<f64>, s: f64, delta: f64| {
            data.v0(a).sqrt() + delta * NormSpec::new(s, 2.0).unwrap().seminorm(a)
        };
        assert!(obj(&DVector::zeros(2), 1.0, 50.0) < obj(&ols, 1.0, 50.0));
    }

    #[test]
    fn orthonormal_design_closed_forms_hold() {
        let n = 200;
        let k = 4;
        let (data, x, y) = orthonormal(3, n, k);
        let nf = n as f64;
        let a_star = data.ols().unwrap();
        let r2 = {
            let xty = x.transpose() * &y;
            xty.norm_squared() / y.norm_squared()
        };
        let delta = 0.003;

        // s = 2: a*_delta = (1 - delta sqrt(N (1/R^2 - 1))) a*.
        let (_, fo2) = sqrt_regression_shrinkage(&data, 2.0, delta).unwrap();
        let factor = 1.0 - delta * (nf * (1.0 / r2 - 1.0)).sqrt();
        assert!(
            (fo2.clone() - &a_star * factor).amax() < 1e-10,
            "ridge closed form off by {:e}",
            (fo2 - &a_star * factor).amax()
        );

        // s = 1: a*_delta = a* - sqrt(N) |y| sqrt(1 - R^2) sign(a*) delta.
        let (_, fo1) = sqrt_regression_shrinkage(&data, 1.0, delta).unwrap();
        let shift = nf.sqrt() * y.norm() * (1.0 - r2).sqrt() * delta;
        let expected = DVector::from_fn(k, |i, _| a_star[i] - shift * a_star[i].signum());
        assert!(
            (fo1.clone() - &expected).amax() < 1e-10,
            "lasso closed form off by {:e}",
            (fo1 - expected).amax()
        );
    }

    #[test]
    fn first_order_tracks_exact_solver() {
        let data = synth(4, 400, &[1.5, -3.0, 0.7], 1.0);
        for s in [1.0, 2.0] {
            let delta = 0.05;
            let (a_star, fo) = sqrt_regression_shrinkage(&data, s, delta).unwrap();
            let exact = exact_sqrt_regression(&data, s, delta).unwrap();
            for i in 0..3 {
                let rel = (fo[i] - exact[i]).abs() / exact[i].abs().max(1e-3);
                assert!(
                    rel < 0.05,
                    "s={s} coord {i}: first-order {} vs exact {} (a* {})",
                    fo[i],
                    exact[i],
                    a_star[i]
                );
            }
        }
    }

    #[test]
    fn shrinkage_moves_every_coordinate_toward_zero() {
        for seed in 0..20 {
            let data = synth(100 + seed, 400, &[1.2, -0.8, 0.5, 2.0, -1.5], 0.8);
            let (a_star, fo) = sqrt_regression_shrinkage(&data, 1.0, 0.02).unwrap();
            for i in 0..5 {
                assert!(
                    a_star[i].signum() * (fo[i] - a_star[i]) <= 0.0,
                    "seed {seed} coord {i} moved away from zero"
                );
            }
        }
    }

    #[test]
    fn zero_coefficient_under_l1_is_refused() {
        // Construct data whose second OLS coefficient is exactly zero:
        // a feature that is uncorrelated with y by symmetry.
        let rows = vec![
            DVector::from_vec(vec![1.0, 1.0, 1.0]),
            DVector::from_vec(vec![-1.0, 1.0, -1.0]),
            DVector::from_vec(vec![1.0, -1.0, 1.0]),
            DVector::from_vec(vec![-1.0, -1.0, -1.0]),
        ];
        let data =
            RegressionData::new(DiscreteMeasure::make_empirical(rows).unwrap(), 2).unwrap();
        let ols = data.ols().unwrap();
        assert!(ols[1].abs() < 1e-15);
        assert!(matches!(
            sqrt_regression_shrinkage(&data, 1.0, 0.1),
            Err(AppError::BadInput(_))
        ));
        // s = 2 has a continuous direction map and is fine.
        assert!(sqrt_regression_shrinkage(&data, 2.0, 0.1).is_ok());
    }
}
