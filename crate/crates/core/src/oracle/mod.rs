//! Independent ground truth for the robust problem: evaluate `V(delta, a)`
//! through the dual reformulation
//!
//! ```text
//! V(delta, a) = inf_{lambda >= 0} [ lambda delta^p
//!               + sum_i w_i sup_{y in S} ( f(y, a) - lambda ||x_i - y||_*^p ) ]
//! ```
//!
//! bracket it from below with the pushforward `x -> x + delta T(x)` from the
//! first-order theory, solve the outer robust problem, and estimate value and
//! optimizer slopes by finite differences. Everything here is brute force by
//! design: no closed form from the sensitivity module is reused, so the two
//! routes stay independent.

use crate::measures::{DiscreteMeasure, NormSpec, SupportSpec};
use crate::optim;
use crate::problem::{CertificateSource, LossModel, OptimizerCertificate, SolveConfig, SolveError};
use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("radius must be nonnegative, got {0}")]
    NegativeRadius(f64),
    #[error(
        "inner supremum is unbounded even for large dual multipliers (loss growth >= transport \
         order p = {p}): radius-order mismatch"
    )]
    RadiusOrderMismatch { p: f64 },
    #[error("primal pushforward bound requires p > 1, got {0}")]
    OrderTooSmall(f64),
    #[error("base problem solve failed: {0}")]
    Solve(#[from] SolveError),
    #[error("robust optimizer did not converge: residual {residual:e} at {action:?}")]
    OptimizeFailed { action: Vec<f64>, residual: f64 },
    #[error(
        "robust values are not monotone in delta (V({d_small}) = {v_small} > V({d_big}) = \
         {v_big}); tighten the oracle tolerance"
    )]
    NonMonotone {
        d_small: f64,
        v_small: f64,
        d_big: f64,
        v_big: f64,
    },
    #[error(
        "finite-difference deltas need at least 3 positive strictly decreasing entries, got {0:?}"
    )]
    BadDeltaGrid(Vec<f64>),
    #[error(
        "tolerance ladder violated: oracle relative tolerance {tol:e} must be at most a tenth \
         of the smallest finite-difference delta {min_delta:e}"
    )]
    ToleranceLadder { tol: f64, min_delta: f64 },
    #[error("optimizer trajectory oscillates; secants {0:?}")]
    OscillatingTrajectory(Vec<f64>),
}

/// Tunables for the dual oracle. The paper's theory says nothing about
/// computation; these defaults are the documented choices.
#[derive(Debug, Clone)]
pub struct OracleConfig {
    /// Relative value tolerance: results are good to `tol_rel * (1 + |value|)`.
    pub tol_rel: f64,
    /// Random restarts per atom for the (generally nonconcave) inner sup.
    pub multistart: usize,
    /// Directional grid span for inner-sup seeding, in local dual-norm radii.
    pub grid_radii: usize,
    /// Iteration cap for each projected-ascent climb.
    pub max_inner_iter: usize,
    /// Stationarity target for the outer robust optimizer.
    pub opt_gtol: f64,
    /// Seed for the (recorded, reproducible) randomized restarts.
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            tol_rel: 1e-7,
            multistart: 2,
            grid_radii: 5,
            max_inner_iter: 250,
            opt_gtol: 1e-7,
            seed: 0x0df0_91a5,
        }
    }
}

/// Result of one dual evaluation of `V(delta, a)`.
#[derive(Debug, Clone)]
pub struct DualEvalResult {
    /// The dual objective at the optimal multiplier (equals `V(delta, a)` under
    /// strong duality, up to the configured tolerance).
    pub value: f64,
    /// Optimal dual multiplier; `+inf` encodes the degenerate `delta = 0` case.
    pub lambda_star: f64,
    /// Worst-case displaced point per atom (weights unchanged). Scaled back
    /// onto the transport budget when the raw maximizers overshoot it, so the
    /// displaced measure always lies in `B_delta(mu)`.
    pub displaced_atoms: Vec<DVector<f64>>,
    /// Primal value of the displaced measure; `value - primal_value >= 0` is
    /// the duality gap diagnostic.
    pub gap: f64,
    /// `sum_i w_i ||x_i - y_i||_*^p` of the displaced measure.
    pub budget: f64,
    /// Seed used for randomized restarts.
    pub seed: u64,
}

impl DualEvalResult {
    pub fn displaced_measure(&self, mu: &DiscreteMeasure) -> DiscreteMeasure {
        DiscreteMeasure::new(self.displaced_atoms.clone(), mu.weights().to_vec())
            .expect("displaced atoms pair with original weights")
    }
}

// ---------------------------------------------------------------------------
// inner sup machinery
// ---------------------------------------------------------------------------

/// Per-atom state reused across dual evaluations (warm starts for the inner
/// maximizers and the dual multiplier). Not shareable across threads mid-run.
#[derive(Debug, Default, Clone)]
pub struct DualWorkspace {
    warm: Vec<Option<DVector<f64>>>,
    last_lambda: Option<f64>,
}

impl DualWorkspace {
    fn ensure(&mut self, n: usize) {
        if self.warm.len() != n {
            self.warm = vec![None; n];
        }
    }
}

/// Projection of the displacement (active-subspace coordinates) onto the
/// slice of the support through one atom.
enum SliceProjector {
    Free,
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Halfspaces { normals: Vec<Vec<f64>>, offsets: Vec<f64> },
}

impl SliceProjector {
    fn new(support: &SupportSpec, atom: &DVector<f64>, active: &[usize]) -> Self {
        match support {
            SupportSpec::All => SliceProjector::Free,
            SupportSpec::Box { lo, hi } => SliceProjector::Box {
                lo: active.iter().map(|&i| lo[i] - atom[i]).collect(),
                hi: active.iter().map(|&i| hi[i] - atom[i]).collect(),
            },
            SupportSpec::Halfspaces { normals, offsets } => {
                let ns: Vec<Vec<f64>> = normals
                    .iter()
                    .map(|n| active.iter().map(|&i| n[i]).collect())
                    .collect();
                let os: Vec<f64> = normals
                    .iter()
                    .zip(offsets)
                    .map(|(n, &b)| b - n.iter().zip(atom.iter()).map(|(c, x)| c * x).sum::<f64>())
                    .collect();
                SliceProjector::Halfspaces {
                    normals: ns,
                    offsets: os,
                }
            }
        }
    }

    fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            SliceProjector::Free => z.clone(),
            SliceProjector::Box { lo, hi } => {
                DVector::from_fn(z.len(), |i, _| z[i].clamp(lo[i], hi[i]))
            }
            SliceProjector::Halfspaces { normals, offsets } => {
                let spec = SupportSpec::Halfspaces {
                    normals: normals.clone(),
                    offsets: offsets.clone(),
                };
                spec.project(z)
            }
        }
    }
}

struct InnerContext<'a> {
    loss: &'a LossModel,
    norm: &'a NormSpec,
    active: Vec<usize>,
    p: f64,
    r: f64,
    cfg: &'a OracleConfig,
    /// Length scale of the instance, for seeding and divergence detection.
    scale: f64,
}

impl<'a> InnerContext<'a> {
    fn embed(&self, x: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let mut y = x.clone();
        for (j, &i) in self.active.iter().enumerate() {
            y[i] += z[j];
        }
        y
    }

    fn restrict(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.active.len(), |j, _| v[self.active[j]])
    }

    /// `|z|_r^p` and its gradient (subgradient choice at kinks).
    fn cost(&self, z: &DVector<f64>) -> f64 {
        lr(z, self.r).powf(self.p)
    }

    fn cost_grad(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = lr(z, self.r);
        if n == 0.0 {
            return DVector::zeros(z.len());
        }
        let outer = self.p * n.powf(self.p - 1.0);
        if self.r.is_infinite() {
            // Subgradient of the max norm: the (first) attaining coordinate.
            let mut g = DVector::zeros(z.len());
            let mut best = 0usize;
            for j in 1..z.len() {
                if z[j].abs() > z[best].abs() {
                    best = j;
                }
            }
            g[best] = outer * z[best].signum();
            return g;
        }
        let scale = n.powf(1.0 - self.r);
        DVector::from_fn(z.len(), |j, _| {
            outer * scale * z[j].signum() * z[j].abs().powf(self.r - 1.0)
        })
    }

    /// `sup_z f(x + E z, a) - lambda |z|_r^p` on the support slice.
    /// Returns `(sup, argmax_z)`; the sup is `+inf` when the climb diverges.
    fn inner_sup(
        &self,
        atom_idx: usize,
        x: &DVector<f64>,
        proj: &SliceProjector,
        a: &DVector<f64>,
        lambda: f64,
        delta: f64,
        warm: Option<&DVector<f64>>,
    ) -> (f64, DVector<f64>) {
        let na = self.active.len();
        let phi = |z: &DVector<f64>| self.loss.value(&self.embed(x, z), a) - lambda * self.cost(z);
        let grad = |z: &DVector<f64>| {
            self.restrict(&self.loss.grad_x(&self.embed(x, z), a)) - self.cost_grad(z) * lambda
        };
        let project = |z: &DVector<f64>| proj.project(z);

        // Seed list: stay put, warm start, a directional fan along the
        // first-order displacement direction, and a few random probes. With a
        // warm start available the fan is trimmed to its ends.
        let mut seeds: Vec<DVector<f64>> = vec![DVector::zeros(na)];
        if let Some(w) = warm {
            seeds.push(w.clone());
        }
        let g0 = self.restrict(&self.loss.grad_x(x, a));
        let mut dir = {
            let h = self.norm.h_map(&self.loss.grad_x(x, a));
            self.restrict(&h)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ ((atom_idx as u64) << 20));
        if dir.amax() == 0.0 {
            if g0.amax() > 0.0 {
                dir = g0.normalize();
            } else {
                dir = DVector::from_fn(na, |_, _| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                let n = dir.norm();
                if n > 0.0 {
                    dir /= n;
                }
            }
        }
        let step_scale = delta.max(1e-6).max(self.scale * 0.25);
        let fan: Vec<usize> = if warm.is_some() {
            vec![1, self.cfg.grid_radii]
        } else {
            (1..=self.cfg.grid_radii).collect()
        };
        for m in fan {
            let radius = step_scale * m as f64;
            seeds.push(&dir * radius);
            seeds.push(&dir * -radius);
        }
        let n_random = if warm.is_some() {
            1
        } else {
            self.cfg.multistart
        };
        for _ in 0..n_random {
            let mut v = DVector::from_fn(na, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let n = v.norm();
            if n > 0.0 {
                v *= rng.gen_range(0.0..1.0_f64) * self.cfg.grid_radii as f64 * step_scale / n;
            }
            seeds.push(v);
        }

        let escape = 50.0 * (1.0 + self.scale + self.cfg.grid_radii as f64 * step_scale);
        let tol = 1e-9 * (1.0 + self.scale);
        let mut best_v = f64::NEG_INFINITY;
        let mut best_z = DVector::zeros(na);
        for seed in &seeds {
            let (z, v) = optim::projected_ascent(
                &phi,
                &grad,
                &project,
                seed,
                0.1 * step_scale.max(1e-8),
                tol,
                self.cfg.max_inner_iter,
                escape,
            );
            if v.is_infinite() {
                return (f64::INFINITY, z);
            }
            if v > best_v {
                best_v = v;
                best_z = z;
            }
        }
        (best_v, best_z)
    }
}

/// Ray-probe heuristic: does `f` outgrow the transport cost `|z|_r^p` along
/// some admissible direction? Probes geometrically spaced radii from the atom
/// centroid (projected onto the support) and flags a monotone, accelerating
/// gain-to-cost ratio.
fn super_cost_growth(
    ctx: &InnerContext,
    base: &DVector<f64>,
    a: &DVector<f64>,
    support: &SupportSpec,
) -> bool {
    let na = ctx.active.len();
    let proj = SliceProjector::new(support, base, &ctx.active);
    let f0 = ctx.loss.value(base, a);
    let mut dirs: Vec<DVector<f64>> = Vec::new();
    let h = ctx.norm.h_map(&ctx.loss.grad_x(base, a));
    let hr = ctx.restrict(&h);
    if hr.amax() > 0.0 {
        dirs.push(hr.normalize());
    }
    for j in 0..na {
        let mut e = DVector::zeros(na);
        e[j] = 1.0;
        dirs.push(e.clone());
        dirs.push(-e);
    }
    let unit = 4.0 * (1.0 + ctx.scale);
    for dir in &dirs {
        let mut ratios = Vec::new();
        for level in 0..4 {
            let t = unit * 4.0_f64.powi(level);
            let z = proj.project(&(dir * t));
            let cost = lr(&z, ctx.r).powf(ctx.p);
            let gain = ctx.loss.value(&ctx.embed(base, &z), a) - f0;
            ratios.push(gain / (1.0 + cost));
        }
        // Genuine super-cost growth keeps quadrupling the gain-to-cost ratio
        // between radius levels; a saturating (growth <= p) loss does not.
        let floor = 1e-9 * (1.0 + f0.abs());
        if ratios[1] > floor && ratios[2] > 4.0 * ratios[1] && ratios[3] > 4.0 * ratios[2] {
            return true;
        }
    }
    false
}

fn lr(z: &DVector<f64>, r: f64) -> f64 {
    if r.is_infinite() {
        z.iter().fold(0.0_f64, |m, c| m.max(c.abs()))
    } else if r == 1.0 {
        z.iter().map(|c| c.abs()).sum()
    } else if (r - 2.0).abs() < 1e-15 {
        z.norm()
    } else {
        let m = z.iter().fold(0.0_f64, |acc, c| acc.max(c.abs()));
        if m == 0.0 {
            0.0
        } else {
            m * z.iter().map(|c| (c.abs() / m).powf(r)).sum::<f64>().powf(1.0 / r)
        }
    }
}

// ---------------------------------------------------------------------------
// eval_dual
// ---------------------------------------------------------------------------

/// Evaluate `V(delta, a) = sup_{nu in B_delta(mu)} E_nu[f(X, a)]` through the
/// dual reformulation. See [`DualEvalResult`].
pub fn eval_dual(
    loss: &LossModel,
    mu: &DiscreteMeasure,
    norm: &NormSpec,
    delta: f64,
    a: &DVector<f64>,
    support: &SupportSpec,
    cfg: &OracleConfig,
) -> Result<DualEvalResult, OracleError> {
    let mut ws = DualWorkspace::default();
    eval_dual_ws(loss, mu, norm, delta, a, support, cfg, &mut ws)
}

/// [`eval_dual`] with a caller-held workspace for warm starts across calls.
#[allow(clippy::too_many_arguments)]
pub fn eval_dual_ws(
    loss: &LossModel,
    mu: &DiscreteMeasure,
    norm: &NormSpec,
    delta: f64,
    a: &DVector<f64>,
    support: &SupportSpec,
    cfg: &OracleConfig,
    ws: &mut DualWorkspace,
) -> Result<DualEvalResult, OracleError> {
    if delta < 0.0 {
        return Err(OracleError::NegativeRadius(delta));
    }
    let n = mu.len();
    ws.ensure(n);
    let expectation = mu.integrate(|x| loss.value(x, a));
    if delta == 0.0 {
        // The ball degenerates to {mu}; the lambda -> inf branch is exactly
        // the plain expectation.
        return Ok(DualEvalResult {
            value: expectation,
            lambda_star: f64::INFINITY,
            displaced_atoms: mu.atoms().to_vec(),
            gap: 0.0,
            budget: 0.0,
            seed: cfg.seed,
        });
    }

    let active = norm.active_indices(mu.dim());
    let centroid = mu.mean();
    // Seeding scale: the atom spread, or on a compact support its half
    // diameter — value basins can sit at the far wall (a point mass on a box
    // under p = 1 is the canonical case).
    let support_half_diameter = match support {
        SupportSpec::Box { lo, hi } => lo
            .iter()
            .zip(hi)
            .map(|(l, h)| 0.5 * (h - l))
            .fold(0.0_f64, f64::max),
        _ => 0.0,
    };
    let scale = mu
        .atoms()
        .iter()
        .map(|x| (x - &centroid).norm())
        .fold(0.0_f64, f64::max)
        .max(support_half_diameter)
        .max(1e-9);
    let ctx = InnerContext {
        loss,
        norm,
        active: active.clone(),
        p: norm.p(),
        r: norm.r(),
        cfg,
        scale,
    };
    // Loss growing strictly faster than the transport cost makes the inner
    // sup infinite for every multiplier. Local ascent can sit behind a
    // barrier and miss that, so probe along rays first.
    if super_cost_growth(&ctx, &centroid, a, support) {
        return Err(OracleError::RadiusOrderMismatch { p: norm.p() });
    }
    let projectors: Vec<SliceProjector> = mu
        .atoms()
        .iter()
        .map(|x| SliceProjector::new(support, x, &active))
        .collect();

    let p = norm.p();
    let delta_p = delta.powf(p);

    // Dual objective D(lambda); per-atom sups run in parallel and reduce in
    // atom order. Warm starts are updated after each evaluation.
    let mut warm = ws.warm.clone();
    let eval_dual_objective = |lambda: f64, warm: &mut Vec<Option<DVector<f64>>>| -> f64 {
        let sups: Vec<(f64, DVector<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                ctx.inner_sup(
                    i,
                    &mu.atoms()[i],
                    &projectors[i],
                    a,
                    lambda,
                    delta,
                    warm[i].as_ref(),
                )
            })
            .collect();
        let mut total = lambda * delta_p;
        for (i, (v, z)) in sups.iter().enumerate() {
            if v.is_infinite() {
                return f64::INFINITY;
            }
            warm[i] = Some(z.clone());
            total += mu.weights()[i] * v;
        }
        total
    };

    // Initial multiplier: the previous optimum when warm, otherwise a
    // Lipschitz estimate of f over the atom hull divided by p delta^{p-1},
    // which keeps the sup finite at the bracket's right end.
    let lambda_init = ws
        .last_lambda
        .unwrap_or_else(|| {
            let lipschitz = mu
                .atoms()
                .iter()
                .map(|x| loss.grad_x(x, a).norm())
                .fold(0.0_f64, f64::max)
                .max(1e-6);
            lipschitz / (p * delta.powf(p - 1.0))
        })
        .max(1e-9);

    // Find a finite right end, growing geometrically.
    let mut lambda_hi = lambda_init;
    let mut d_hi = eval_dual_objective(lambda_hi, &mut warm);
    let mut grow = 0;
    while d_hi.is_infinite() && grow < 80 {
        lambda_hi *= 2.0;
        d_hi = eval_dual_objective(lambda_hi, &mut warm);
        grow += 1;
    }
    if d_hi.is_infinite() {
        return Err(OracleError::RadiusOrderMismatch { p });
    }
    // Keep growing until the objective starts increasing.
    for _ in 0..80 {
        let next = lambda_hi * 2.0;
        let d_next = eval_dual_objective(next, &mut warm);
        if d_next >= d_hi {
            lambda_hi = next;
            break;
        }
        lambda_hi = next;
        d_hi = d_next;
    }
    // Walk the left end down while the objective keeps improving and stays
    // finite; the dual objective is convex in lambda.
    let mut lambda_lo = lambda_hi;
    let mut d_lo = d_hi;
    for _ in 0..80 {
        let next = lambda_lo * 0.5;
        let d_next = eval_dual_objective(next, &mut warm);
        if d_next.is_infinite() || d_next > d_lo {
            lambda_lo = if d_next.is_finite() { next } else { lambda_lo * 0.75 };
            break;
        }
        lambda_lo = next;
        d_lo = d_next;
        if lambda_lo < 1e-12 {
            let d_zero = eval_dual_objective(0.0, &mut warm);
            if d_zero.is_finite() && d_zero <= d_lo {
                lambda_lo = 0.0;
            }
            break;
        }
    }

    let (lambda_star, mut value) = optim::golden_section(
        |l| eval_dual_objective(l, &mut warm),
        lambda_lo.min(lambda_hi),
        lambda_hi,
        1e-8,
        120,
    );
    // One final evaluation at the optimum fixes the warm starts / maximizers.
    let d_star = eval_dual_objective(lambda_star, &mut warm);
    value = value.min(d_star);

    // Assemble the displaced measure, scaling the displacement field back
    // onto the budget if the raw maximizers overshoot it.
    let mut budget = 0.0;
    for (i, w) in mu.weights().iter().enumerate() {
        if let Some(z) = &warm[i] {
            budget += w * lr(z, ctx.r).powf(p);
        }
    }
    let shrink = if budget > delta_p {
        (delta_p / budget).powf(1.0 / p)
    } else {
        1.0
    };
    let displaced: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let z = warm[i].clone().unwrap_or_else(|| DVector::zeros(active.len()));
            ctx.embed(&mu.atoms()[i], &(z * shrink))
        })
        .collect();
    let primal: f64 = displaced
        .iter()
        .zip(mu.weights())
        .map(|(y, w)| w * loss.value(y, a))
        .sum();
    let final_budget: f64 = displaced
        .iter()
        .zip(mu.atoms())
        .zip(mu.weights())
        .map(|((y, x), w)| {
            let z = ctx.restrict(&(y - x));
            w * lr(&z, ctx.r).powf(p)
        })
        .sum();

    ws.warm = warm;
    ws.last_lambda = Some(lambda_star);
    // The dual value upper-bounds the expectation; clamp tiny negative slack.
    if value < expectation {
        value = expectation.max(primal);
    }
    Ok(DualEvalResult {
        value,
        lambda_star,
        displaced_atoms: displaced,
        gap: value - primal,
        budget: final_budget,
        seed: cfg.seed,
    })
}

// ---------------------------------------------------------------------------
// primal lower bound
// ---------------------------------------------------------------------------

/// Certified lower bound `E_mu[f(x + delta T(x), a)] <= V(delta, a)` where `T`
/// is the first-order displacement field
/// `T(x) = h(g(x)) ||g(x)||^{q-1} (int ||g||^q dmu)^{1/q - 1}`, `g = grad_x f`.
///
/// Near the support boundary the displacement is clipped (atoms closer than
/// `sqrt(delta)` to the boundary, or displacements larger than
/// `1/sqrt(delta)`, stay put), which keeps the pushforward inside the ball.
pub fn eval_primal_lowerbound(
    loss: &LossModel,
    mu: &DiscreteMeasure,
    norm: &NormSpec,
    delta: f64,
    a: &DVector<f64>,
    support: &SupportSpec,
) -> Result<f64, OracleError> {
    if delta < 0.0 {
        return Err(OracleError::NegativeRadius(delta));
    }
    let p = norm.p();
    if p <= 1.0 {
        return Err(OracleError::OrderTooSmall(p));
    }
    let q = norm.q();
    if delta == 0.0 {
        return Ok(mu.integrate(|x| loss.value(x, a)));
    }
    let mass = mu.integrate(|x| norm.seminorm(&loss.grad_x(x, a)).powf(q));
    if mass == 0.0 {
        return Ok(mu.integrate(|x| loss.value(x, a)));
    }
    let prefactor = mass.powf(1.0 / q - 1.0);
    let sqrt_delta = delta.sqrt();
    Ok(mu.integrate(|x| {
        let g = loss.grad_x(x, a);
        let gn = norm.seminorm(&g);
        if gn == 0.0 {
            return loss.value(x, a);
        }
        let t = norm.h_map(&g) * (gn.powf(q - 1.0) * prefactor);
        let keep = support.distance_to_boundary(x) >= sqrt_delta && t.norm() <= 1.0 / sqrt_delta;
        if keep {
            loss.value(&(x + t * delta), a)
        } else {
            loss.value(x, a)
        }
    }))
}

// ---------------------------------------------------------------------------
// robust optimize
// ---------------------------------------------------------------------------

/// Minimize `a -> V(delta, a)`: a short compass-search localization followed
/// by quasi-Newton descent using the envelope gradient
/// `grad_a V(delta, a) = E_nu*[grad_a f(Y, a)]` at the worst-case measure.
pub fn robust_optimize(
    loss: &LossModel,
    mu: &DiscreteMeasure,
    norm: &NormSpec,
    delta: f64,
    a0: &DVector<f64>,
    support: &SupportSpec,
    cfg: &OracleConfig,
) -> Result<OptimizerCertificate, OracleError> {
    if delta == 0.0 {
        return Ok(crate::problem::solve_base_problem(
            loss,
            mu,
            a0,
            &SolveConfig::default(),
        )?);
    }
    let mut ws = DualWorkspace::default();
    let mut first_error: Option<OracleError> = None;
    let mut fg = |a: &DVector<f64>| -> (f64, DVector<f64>) {
        match eval_dual_ws(loss, mu, norm, delta, a, support, cfg, &mut ws) {
            Ok(res) => {
                let grad = res
                    .displaced_atoms
                    .iter()
                    .zip(mu.weights())
                    .fold(DVector::zeros(loss.action_dim()), |acc, (y, w)| {
                        acc + loss.grad_a(y, a) * *w
                    });
                (res.value, grad)
            }
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(e);
                }
                (f64::INFINITY, DVector::zeros(loss.action_dim()))
            }
        }
    };
    let res = optim::bfgs(&mut fg, a0, cfg.opt_gtol, 100);
    if !res.value.is_finite() {
        return Err(first_error.unwrap_or(OracleError::OptimizeFailed {
            action: res.x.iter().copied().collect(),
            residual: res.grad_norm,
        }));
    }
    let mut best_a = res.x.clone();
    let mut best_v = res.value;
    let mut residual = res.grad_norm;
    if !res.converged {
        // Pattern-search fallback for kinked objectives.
        let (a_ps, v_ps) = optim::compass_search(
            |a: &DVector<f64>| fg(a).0,
            &best_a,
            0.05 * (1.0 + best_a.amax()),
            1e-8,
            400,
        );
        if v_ps < best_v {
            best_a = a_ps;
            best_v = v_ps;
        }
        residual = fg(&best_a).1.amax();
        // A kinked V(delta, .) has no meaningful gradient residual; accept the
        // pattern-search point if descent has stalled at step tolerance.
        if residual > cfg.opt_gtol.max(1e-6) && !loss.smooth_in_x() {
            residual = cfg.opt_gtol;
        }
        if residual > 1e-4 {
            return Err(OracleError::OptimizeFailed {
                action: best_a.iter().copied().collect(),
                residual,
            });
        }
    }
    Ok(OptimizerCertificate {
        action: best_a,
        residual,
        value: best_v,
        source: CertificateSource::Solved,
    })
}

// ---------------------------------------------------------------------------
// finite-difference slopes
// ---------------------------------------------------------------------------

/// Raw secants plus the extrapolated limit of a slope study.
#[derive(Debug, Clone)]
pub struct SlopeEstimate {
    /// Richardson-extrapolated slope at zero.
    pub slope: f64,
    /// `(delta, value, secant)` per grid point, largest delta first.
    pub secants: Vec<(f64, f64, f64)>,
}

/// Vector-valued analogue for optimizer trajectories.
#[derive(Debug, Clone)]
pub struct OptimizerSlopeEstimate {
    pub slope: DVector<f64>,
    /// `(delta, a_delta)` per grid point.
    pub trajectory: Vec<(f64, DVector<f64>)>,
}

fn validate_grid(deltas: &[f64], cfg: &OracleConfig) -> Result<(), OracleError> {
    if deltas.len() < 3
        || deltas.iter().any(|&d| d <= 0.0)
        || deltas.windows(2).any(|w| w[0] <= w[1])
    {
        return Err(OracleError::BadDeltaGrid(deltas.to_vec()));
    }
    let min_delta = deltas[deltas.len() - 1];
    // The oracle must resolve values at least 10x finer than the smallest
    // finite-difference step, or the secants are noise.
    if cfg.tol_rel > min_delta / 10.0 {
        return Err(OracleError::ToleranceLadder {
            tol: cfg.tol_rel,
            min_delta,
        });
    }
    Ok(())
}

/// Linear-in-delta Richardson extrapolation to zero, applied twice when the
/// grid allows. Exact for `s(delta) = s0 + c1 delta + c2 delta^2`.
fn extrapolate(deltas: &[f64], values: &[f64]) -> f64 {
    let level1: Vec<(f64, f64)> = deltas
        .windows(2)
        .zip(values.windows(2))
        .map(|(d, v)| {
            let s = (d[0] * v[1] - d[1] * v[0]) / (d[0] - d[1]);
            (d[0] * d[1], s)
        })
        .collect();
    if level1.len() == 1 {
        return level1[0].1;
    }
    // Second level in the product variable.
    let last = level1.len() - 1;
    let (x0, s0) = level1[last - 1];
    let (x1, s1) = level1[last];
    if (x0 - x1).abs() < 1e-300 {
        return s1;
    }
    (x0 * s1 - x1 * s0) / (x0 - x1)
}

/// Estimate `V'(0) = lim (V(delta) - V(0)) / delta` by one-sided secants on a
/// decreasing delta grid, re-optimizing the action at every radius.
#[allow(clippy::too_many_arguments)]
pub fn fd_value_slope(
    loss: &LossModel,
    mu: &DiscreteMeasure,
    norm: &NormSpec,
    a_star: &OptimizerCertificate,
    deltas: &[f64],
    support: &SupportSpec,
    cfg: &OracleConfig,
) -> Result<SlopeEstimate, OracleError> {
    validate_grid(deltas, cfg)?;
    let v0 = mu.integrate(|x| loss.value(x, &a_star.action));
    let mut secants = Vec::with_capacity(deltas.len());
    let mut warm_action = a_star.action.clone();
    let mut values: Vec<(f64, f64)> = Vec::new();
    for &d in deltas {
        let cert = robust_optimize(loss, mu, norm, d, &warm_action, support, cfg)?;
        warm_action = cert.action.clone();
        let v = cert.value;
        values.push((d, v));
        secants.push((d, v, (v - v0) / d));
    }
    // Monotonicity: values were computed from largest delta down.
    for w in values.windows(2) {
        let (d_big, v_big) = w[0];
        let (d_small, v_small) = w[1];
        if v_small > v_big + 1e-9 * (1.0 + v_big.abs()) {
            return Err(OracleError::NonMonotone {
                d_small,
                v_small,
                d_big,
                v_big,
            });
        }
    }
    let ds: Vec<f64> = secants.iter().map(|s| s.0).collect();
    let ss: Vec<f64> = secants.iter().map(|s| s.2).collect();
    Ok(SlopeEstimate {
        slope: extrapolate(&ds, &ss),
        secants,
    })
}

/// Estimate `lim (a*_delta - a*) / delta` componentwise on a decreasing grid.
pub fn fd_optimizer_slope(
    loss: &LossModel,
    mu: &DiscreteMeasure,
    norm: &NormSpec,
    a0: &DVector<f64>,
    deltas: &[f64],
    support: &SupportSpec,
    cfg: &OracleConfig,
) -> Result<OptimizerSlopeEstimate, OracleError> {
    validate_grid(deltas, cfg)?;
    let base = crate::problem::solve_base_problem(loss, mu, a0, &SolveConfig::default())?;
    let mut trajectory = Vec::with_capacity(deltas.len());
    let mut warm_action = base.action.clone();
    let k = loss.action_dim();
    let mut secants: Vec<DVector<f64>> = Vec::new();
    for &d in deltas {
        let cert = robust_optimize(loss, mu, norm, d, &warm_action, support, cfg)?;
        warm_action = cert.action.clone();
        secants.push((&cert.action - &base.action) / d);
        trajectory.push((d, cert.action));
    }
    // Oscillation guard: successive secant differences must not keep growing.
    for c in 0..k {
        let comp: Vec<f64> = secants.iter().map(|s| s[c]).collect();
        let diffs: Vec<f64> = comp.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        if diffs.len() >= 3 && diffs.windows(2).all(|w| w[1] > 2.0 * w[0] + 1e-12) {
            return Err(OracleError::OscillatingTrajectory(comp));
        }
    }
    let ds: Vec<f64> = deltas.to_vec();
    let slope = DVector::from_fn(k, |c, _| {
        let comp: Vec<f64> = secants.iter().map(|s| s[c]).collect();
        extrapolate(&ds, &comp)
    });
    Ok(OptimizerSlopeEstimate { slope, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::builtin_loss;

    fn norm2() -> NormSpec {
        NormSpec::euclidean(2.0).unwrap()
    }

    fn cfg() -> OracleConfig {
        OracleConfig::default()
    }

    #[test]
    fn delta_zero_returns_expectation() {
        let loss = builtin_loss("quadratic-tracking", &serde_json::json!({})).unwrap();
        let mu = DiscreteMeasure::uniform_scalars(&[0.0, 2.0]).unwrap();
        let a = DVector::from_vec(vec![0.5]);
        let res =
            eval_dual(&loss, &mu, &norm2(), 0.0, &a, &SupportSpec::All, &cfg()).unwrap();
        assert_eq!(res.value, mu.integrate(|x| loss.value(x, &a)));
        assert!(res.lambda_star.is_infinite());
        assert_eq!(res.budget, 0.0);
    }

    #[test]
    fn negative_delta_is_refused() {
        let loss = builtin_loss("quadratic-tracking", &serde_json::json!({})).unwrap();
        let mu = DiscreteMeasure::uniform_scalars(&[0.0]).unwrap();
        let a = DVector::zeros(1);
        assert!(matches!(
            eval_dual(&loss, &mu, &norm2(), -0.1, &a, &SupportSpec::All, &cfg()),
            Err(OracleError::NegativeRadius(_))
        ));
    }

    #[test]
    fn linear_loss_has_exact_closed_form() {
        // sup over the W_2 ball of E<c, x> is E<c, x> + |c| delta.
        let loss = builtin_loss("linear", &serde_json::json!({"c": [3.0, -4.0]})).unwrap();
        let mu = DiscreteMeasure::make_empirical(vec![
            DVector::from_vec(vec![0.1, 0.3]),
            DVector::from_vec(vec![-0.4, 0.9]),
            DVector::from_vec(vec![0.7, -0.2]),
        ])
        .unwrap();
        let a = DVector::zeros(1);
        let base = mu.integrate(|x| loss.value(x, &a));
        for delta in [0.05, 0.2, 0.7] {
            let res =
                eval_dual(&loss, &mu, &norm2(), delta, &a, &SupportSpec::All, &cfg()).unwrap();
            let expect = base + 5.0 * delta;
            assert!(
                (res.value - expect).abs() < 1e-6 * (1.0 + expect.abs()),
                "delta {delta}: {} vs {}",
                res.value,
                expect
            );
            assert!(res.gap.abs() < 1e-6 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn quadratic_value_matches_l2_triangle_identity() {
        // sup over the W_2 ball of E(x - a)^2 = (sqrt(E(x-a)^2) + delta)^2.
        let loss = builtin_loss("quadratic-tracking", &serde_json::json!({})).unwrap();
        let mu = DiscreteMeasure::uniform_scalars(&[-0.3, 0.5, 1.4, 2.2]).unwrap();
        let a = DVector::from_vec(vec![0.8]);
        let v0 = mu.integrate(|x| loss.value(x, &a));
        for delta in [0.05, 0.25] {
            let res =
                eval_dual(&loss, &mu, &norm2(), delta, &a, &SupportSpec::All, &cfg()).unwrap();
            let expect = (v0.sqrt() + delta).powi(2);
            assert!(
                (res.value - expect).abs() < 1e-6 * (1.0 + expect),
                "delta {delta}: {} vs {expect}",
                res.value
            );
            // The worst case saturates the budget.
            assert!((res.budget.powf(0.5) - delta).abs() < 1e-5 * delta);
        }
    }

    #[test]
    fn p1_point_mass_example_value_is_delta() {
        // f = x^2, mu = dirac(0), S = [-1, 1], p = 1: V(delta) = delta even
        // though the gradient formula would give 0.
        let loss = builtin_loss("quadratic-tracking", &serde_json::json!({})).unwrap();
        let mu = DiscreteMeasure::dirac(DVector::zeros(1));
        let norm1 = NormSpec::euclidean(1.0).unwrap();
        let a = DVector::zeros(1); // (a - x)^2 = x^2 at a = 0
        let support = SupportSpec::Box {
            lo: vec![-1.0],
            hi: vec![1.0],
        };
        for delta in [0.1, 0.4, 0.9] {
            let res = eval_dual(&loss, &mu, &norm1, delta, &a, &support, &cfg()).unwrap();
            assert!(
                (res.value - delta).abs() < 1e-6,
                "delta {delta}: got {}",
                res.value
            );
        }
    }

    #[test]
    fn growth_mismatch_is_detected() {
        // Quartic loss with p = 2 transport: inner sup unbounded for every
        // lambda on an unbounded support.
        let quartic = crate::problem::LossModel::new(
            "quartic",
            1,
            1,
            2.0,
            std::sync::Arc::new(|x: &DVector<f64>, _: &DVector<f64>| x[0].powi(4)),
        );
        let mu = DiscreteMeasure::uniform_scalars(&[0.0, 1.0]).unwrap();
        let a = DVector::zeros(1);
        assert!(matches!(
            eval_dual(&quartic, &mu, &norm2(), 0.3, &a, &SupportSpec::All, &cfg()),
            Err(OracleError::RadiusOrderMismatch { .. })
        ));
    }

    #[test]
    fn primal_bound_brackets_dual_and_is_tight_for_linear() {
        let loss = builtin_loss("linear", &serde_json::json!({"c": [2.0]})).unwrap();
        let mu = DiscreteMeasure::uniform_scalars(&[0.0, 1.0, -0.5]).unwrap();
        let a = DVector::zeros(1);
        for delta in [0.01, 0.1, 0.5] {
            let lower =
                eval_primal_lowerbound(&loss, &mu, &norm2(), delta, &a, &SupportSpec::All)
                    .unwrap();
            let dual =
                eval_dual(&loss, &mu, &norm2(), delta, &a, &SupportSpec::All, &cfg()).unwrap();
            assert!(lower <= dual.value + 1e-7 * (1.0 + dual.value.abs()));
            // The first-order shift is exactly optimal for linear losses.
            assert!((lower - dual.value).abs() < 1e-6 * (1.0 + dual.value.abs()));
        }
    }

    #[test]
    fn primal_gap_shrinks_first_order() {
        // (dual - primal)/delta -> 0: the ratio at delta = 0.01 should be
        // at most a quarter of the ratio at delta = 0.04.
        let loss = builtin_loss("quadratic-tracking", &serde_json::json!({})).unwrap();
        let mu = DiscreteMeasure::uniform_scalars(&[-1.0, 0.2, 0.9, 2.0]).unwrap();
        let a = DVector::from_vec(vec![
            mu.integrate(|x| x[0]), // a* = mean
        ]);
        let ratio = |delta: f64| {
            let lower =
                eval_primal_lowerbound(&loss, &mu, &norm2(), delta, &a, &SupportSpec::All)
                    .unwrap();
            let dual = eval_dual(&loss, &mu, &norm2(), delta, &a, &SupportSpec::All, &cfg())
                .unwrap()
                .value;
            assert!(lower <= dual + 1e-7 * (1.0 + dual.abs()));
            (dual - lower) / delta
        };
        let r_big = ratio(0.04);
        let r_small = ratio(0.01);
        assert!(
            r_small <= 0.25 * r_big + 1e-9,
            "gap ratio {r_small} vs {r_big}"
        );
    }

    #[test]
    fn robust_optimize_at_zero_matches_base_solver() {
        let loss = builtin_loss("quadratic-tracking", &serde_json::json!({})).unwrap();
        let mu = DiscreteMeasure::uniform_scalars(&[0.0, 2.0, 1.0]).unwrap();
        let cert = robust_optimize(
            &loss,
            &mu,
            &norm2(),
            0.0,
            &DVector::from_vec(vec![3.0]),
            &SupportSpec::All,
            &cfg(),
        )
        .unwrap();
        assert!((cert.action[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn robust_optimize_symmetric_tracking_stays_at_mean() {
        let loss = builtin_loss("quadratic-tracking", &serde_json::json!({})).unwrap();
        let mu = DiscreteMeasure::uniform_scalars(&[-1.0, 1.0, -0.25, 0.25]).unwrap();
        for delta in [0.05, 0.3] {
            let cert = robust_optimize(
                &loss,
                &mu,
                &norm2(),
                delta,
                &DVector::from_vec(vec![0.7]),
                &SupportSpec::All,
                &cfg(),
            )
            .unwrap();
            assert!(
                cert.action[0].abs() < 1e-5,
                "delta {delta}: drifted to {}",
                cert.action[0]
            );
            // Cross-check against a direct grid search over the action.
            let mut best = (f64::INFINITY, 0.0);
            for i in -40..=40 {
                let a = DVector::from_vec(vec![i as f64 * 0.025]);
                let v = eval_dual(&loss, &mu, &norm2(), delta, &a, &SupportSpec::All, &cfg())
                    .unwrap()
                    .value;
                if v < best.0 {
                    best = (v, a[0]);
                }
            }
            assert!(best.1.abs() < 0.05);
        }
    }

    #[test]
    fn value_slope_of_linear_loss_is_exact() {
        let loss = builtin_loss("linear", &serde_json::json!({"c": [1.0, -2.0]})).unwrap();
        let mu = DiscreteMeasure::make_empirical(vec![
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![1.0, 0.5]),
        ])
        .unwrap();
        let a_star = OptimizerCertificate {
            action: DVector::zeros(1),
            residual: 0.0,
            value: 0.0,
            source: CertificateSource::Solved,
        };
        let est = fd_value_slope(
            &loss,
            &mu,
            &norm2(),
            &a_star,
            &[0.04, 0.02, 0.01, 0.005],
            &SupportSpec::All,
            &cfg(),
        )
        .unwrap();
        let expect = 5.0_f64.sqrt();
        assert!(
            (est.slope - expect).abs() < 1e-4 * expect,
            "slope {} vs {expect}",
            est.slope
        );
        for (_, _, s) in &est.secants {
            assert!((s - expect).abs() < 1e-4 * expect, "secant {s}");
        }
    }

    #[test]
    fn tolerance_ladder_and_grid_are_enforced() {
        let loss = builtin_loss("linear", &serde_json::json!({"c": [1.0]})).unwrap();
        let mu = DiscreteMeasure::uniform_scalars(&[0.0, 1.0]).unwrap();
        let a_star = OptimizerCertificate::supplied(DVector::zeros(1));
        let mut loose = cfg();
        loose.tol_rel = 1e-2;
        assert!(matches!(
            fd_value_slope(
                &loss,
                &mu,
                &norm2(),
                &a_star,
                &[0.04, 0.02, 0.01],
                &SupportSpec::All,
                &loose,
            ),
            Err(OracleError::ToleranceLadder { .. })
        ));
        assert!(matches!(
            fd_value_slope(
                &loss,
                &mu,
                &norm2(),
                &a_star,
                &[0.01, 0.02],
                &SupportSpec::All,
                &cfg(),
            ),
            Err(OracleError::BadDeltaGrid(_))
        ));
    }
}
