//! Small shared optimizers: golden-section search, BFGS with backtracking
//! line search, projected gradient ascent and compass (pattern) search.
//!
//! These are deliberately plain implementations tuned for the low-dimensional,
//! smooth-to-mildly-kinked objectives that show up in this crate. They are not
//! a general-purpose optimization toolbox.

use nalgebra::{DMatrix, DVector};

/// Inverse golden ratio, `(sqrt(5) - 1) / 2`.
const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Minimize a univariate function on `[lo, hi]` by golden-section search.
///
/// Returns `(x_min, f(x_min))`. The bracket shrinks until its width falls
/// below `xtol * (1 + |x|)` or `max_iter` iterations have run.
pub fn golden_section<F: FnMut(f64) -> f64>(
    mut f: F,
    mut lo: f64,
    mut hi: f64,
    xtol: f64,
    max_iter: usize,
) -> (f64, f64) {
    debug_assert!(lo <= hi);
    let mut b = hi - INV_PHI * (hi - lo);
    let mut c = lo + INV_PHI * (hi - lo);
    let mut fb = f(b);
    let mut fc = f(c);
    for _ in 0..max_iter {
        if hi - lo <= xtol * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
        if fb <= fc {
            hi = c;
            c = b;
            fc = fb;
            b = hi - INV_PHI * (hi - lo);
            fb = f(b);
        } else {
            lo = b;
            b = c;
            fb = fc;
            c = lo + INV_PHI * (hi - lo);
            fc = f(c);
        }
    }
    if fb <= fc {
        (b, fb)
    } else {
        (c, fc)
    }
}

/// Grow a bracket `[lo, hi]` around `x0 >= floor` such that the minimum of a
/// univariate convex function lies inside, expanding geometrically.
///
/// `f` may return `+inf` to the left of some threshold; the left end stops
/// shrinking once it hits `floor` or an infinite value.
pub fn bracket_convex_min<F: FnMut(f64) -> f64>(
    mut f: F,
    x0: f64,
    floor: f64,
    max_expand: usize,
) -> (f64, f64) {
    let mut hi = x0.max(floor + 1e-12);
    let mut fhi = f(hi);
    // Push right until the function starts increasing (or stops being inf).
    for _ in 0..max_expand {
        let nxt = hi * 2.0;
        let fnxt = f(nxt);
        if fnxt >= fhi && fnxt.is_finite() {
            hi = nxt;
            break;
        }
        hi = nxt;
        fhi = fnxt;
    }
    // Push left geometrically towards the floor while the function keeps
    // decreasing and stays finite.
    let mut lo = x0.max(floor);
    let mut flo = f(lo);
    if !flo.is_finite() {
        // x0 itself infeasible: walk right until finite.
        let mut t = lo.max(1e-12);
        for _ in 0..max_expand {
            t *= 2.0;
            if f(t).is_finite() {
                lo = t / 2.0; // last infinite point as left edge
                break;
            }
        }
        return (lo, hi.max(t * 2.0));
    }
    for _ in 0..max_expand {
        let nxt = floor.max(lo / 2.0 - (lo - floor) * 0.5);
        if nxt >= lo - 1e-300 {
            break;
        }
        let fnxt = f(nxt);
        if !fnxt.is_finite() || fnxt >= flo {
            // keep nxt as the left edge: minimum is to its right
            lo = nxt;
            break;
        }
        lo = nxt;
        flo = fnxt;
        if (lo - floor).abs() < 1e-300 {
            break;
        }
    }
    (lo.min(hi), hi.max(lo))
}

/// Result of a BFGS run.
#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize `f` with BFGS and Armijo backtracking.
///
/// `fg` evaluates the objective and its gradient. Convergence is declared when
/// the sup-norm of the gradient falls below `gtol`.
pub fn bfgs<FG>(mut fg: FG, x0: &DVector<f64>, gtol: f64, max_iter: usize) -> BfgsResult
where
    FG: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = x0.clone();
    let (mut fx, mut gx) = fg(&x);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut best = BfgsResult {
        x: x.clone(),
        value: fx,
        grad_norm: gx.amax(),
        iterations: 0,
        converged: gx.amax() <= gtol,
    };
    if best.converged {
        return best;
    }
    for it in 0..max_iter {
        let mut dir = -(&h_inv * &gx);
        let mut slope = dir.dot(&gx);
        if !(slope < 0.0) || !slope.is_finite() {
            // Reset to steepest descent when curvature information degrades.
            h_inv = DMatrix::identity(n, n);
            dir = -gx.clone();
            slope = dir.dot(&gx);
            if !(slope < 0.0) {
                break;
            }
        }
        // Armijo backtracking.
        let mut t = 1.0;
        let mut accepted = false;
        let mut x_new = x.clone();
        for _ in 0..60 {
            x_new = &x + &dir * t;
            let f_try = fg(&x_new).0;
            if f_try.is_finite() && f_try <= fx + 1e-4 * t * slope {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        let (f_new, g_new) = fg(&x_new);
        let s = &x_new - &x;
        let y = &g_new - &gx;
        let sy = s.dot(&y);
        if sy > 1e-14 * s.norm() * y.norm() {
            // Standard BFGS inverse update.
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - &s * y.transpose() * rho;
            let right = &i - &y * s.transpose() * rho;
            h_inv = &left * &h_inv * &right + &s * s.transpose() * rho;
        }
        x = x_new;
        fx = f_new;
        gx = g_new;
        let gn = gx.amax();
        if fx <= best.value {
            best = BfgsResult {
                x: x.clone(),
                value: fx,
                grad_norm: gn,
                iterations: it + 1,
                converged: gn <= gtol,
            };
        }
        if gn <= gtol {
            best = BfgsResult {
                x,
                value: fx,
                grad_norm: gn,
                iterations: it + 1,
                converged: true,
            };
            return best;
        }
    }
    best.grad_norm = gx.amax();
    best
}

/// Projected gradient ascent with Armijo backtracking for `max f(y)` subject
/// to `y = project(y)`.
///
/// Returns `(y, f(y))`. `unbounded_radius` aborts the climb (returning
/// `f = +inf`) once the iterate leaves a ball of that radius around the start
/// while still ascending, which is how the callers detect a sup that is
/// infinite.
pub fn projected_ascent<F, G, P>(
    f: &F,
    grad: &G,
    project: &P,
    y0: &DVector<f64>,
    step0: f64,
    tol: f64,
    max_iter: usize,
    unbounded_radius: f64,
) -> (DVector<f64>, f64)
where
    F: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
    P: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut y = project(y0);
    let mut fy = f(&y);
    let mut step = step0.max(1e-12);
    for _ in 0..max_iter {
        if (&y - y0).norm() > unbounded_radius {
            return (y, f64::INFINITY);
        }
        let g = grad(&y);
        let gn = g.norm();
        if gn <= tol {
            break;
        }
        let mut advanced = false;
        for _ in 0..40 {
            let cand = project(&(&y + &g * step));
            let fc = f(&cand);
            let gain = fc - fy;
            if fc.is_finite() && gain > 1e-4 * step * gn * gn.min(1.0) {
                // Movement below floating noise: converged.
                if gain <= 1e-16 * (1.0 + fy.abs()) && (&cand - &y).norm() <= tol {
                    y = cand;
                    fy = fc;
                    advanced = false;
                    break;
                }
                y = cand;
                fy = fc;
                step *= 1.8;
                advanced = true;
                break;
            }
            step *= 0.4;
            if step < 1e-16 {
                break;
            }
        }
        if !advanced {
            break;
        }
    }
    (y, fy)
}

/// Compass (pattern) search minimizing `f` by coordinate probes.
///
/// Deterministic and derivative-free; used to localize minima before a
/// gradient-based refinement, and as a fallback when gradients are noisy.
pub fn compass_search<F>(
    mut f: F,
    x0: &DVector<f64>,
    step0: f64,
    step_tol: f64,
    max_iter: usize,
) -> (DVector<f64>, f64)
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let n = x0.len();
    let mut x = x0.clone();
    let mut fx = f(&x);
    let mut step = step0;
    for _ in 0..max_iter {
        if step < step_tol {
            break;
        }
        let mut improved = false;
        for i in 0..n {
            for sgn in [1.0_f64, -1.0] {
                let mut cand = x.clone();
                cand[i] += sgn * step;
                let fc = f(&cand);
                if fc < fx - 1e-18 {
                    x = cand;
                    fx = fc;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (x, fx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_finds_quadratic_min() {
        // Value comparisons cannot resolve the argmin below
        // sqrt(f(x*) * eps) ~ 3e-8 on this flat quadratic; the value itself
        // is exact to machine precision.
        let (x, v) = golden_section(|t| (t - 1.3) * (t - 1.3) + 2.0, -4.0, 9.0, 1e-12, 200);
        assert!((x - 1.3).abs() < 1e-7);
        assert!((v - 2.0).abs() < 1e-15);
    }

    #[test]
    fn bfgs_solves_rosenbrock_like_quadratic() {
        let a = DVector::from_vec(vec![3.0, -1.0, 0.5]);
        let res = bfgs(
            |x: &DVector<f64>| {
                let d = x - &a;
                (d.dot(&d), 2.0 * d)
            },
            &DVector::zeros(3),
            1e-10,
            200,
        );
        assert!(res.converged);
        assert!((res.x - a).amax() < 1e-9);
    }

    #[test]
    fn compass_reaches_minimum() {
        let (x, _) = compass_search(
            |x: &DVector<f64>| (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2),
            &DVector::zeros(2),
            1.0,
            1e-10,
            10_000,
        );
        assert!((x[0] - 2.0).abs() < 1e-8);
        assert!((x[1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn ascent_detects_unbounded_objective() {
        // f(y) = y^2 has no finite sup over the line.
        let (_, v) = projected_ascent(
            &|y: &DVector<f64>| y[0] * y[0],
            &|y: &DVector<f64>| DVector::from_vec(vec![2.0 * y[0]]),
            &|y: &DVector<f64>| y.clone(),
            &DVector::from_vec(vec![1.0]),
            0.5,
            1e-12,
            10_000,
            1e6,
        );
        assert!(v.is_infinite());
    }
}
