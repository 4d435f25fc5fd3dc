//! First-order sensitivity analysis of Wasserstein distributionally robust
//! optimization (DRO) problems.
//!
//! The robust problem is `V(delta) = inf_a sup_{nu in B_delta(mu)} E_nu[f(X,a)]`,
//! where `B_delta(mu)` is a `p`-Wasserstein ball (cost given by a dual seminorm)
//! around a baseline discrete measure `mu`. This crate computes:
//!
//! * `upsilon` — the value sensitivity `V'(0)`, an `L^q(mu)` norm of the
//!   state-gradient of the loss at the non-robust optimizer;
//! * `beth` — the optimizer sensitivity `lim (a*_delta - a*)/delta`;
//! * positive-radius and linearly-constrained variants of `upsilon`;
//! * an independent brute-force oracle ([`oracle`]) that evaluates the robust
//!   value through its dual reformulation, brackets it with a primal
//!   pushforward bound, and estimates the same sensitivities by finite
//!   differences — used to validate every closed-form result;
//! * worked applications ([`apps`]): robust call pricing, optimized certainty
//!   equivalents and hedging, square-root LASSO/Ridge shrinkage, a neural
//!   network robustness metric, uncertainty-quantification expansions and an
//!   out-of-sample CLT study.

pub mod apps;
pub mod measures;
pub mod optim;
pub mod oracle;
pub mod problem;
pub mod sensitivity;

pub use measures::{DiscreteMeasure, NormSpec, SupportSpec};
pub use problem::{ConstraintSet, LossModel, OptimizerCertificate};
pub use sensitivity::SensitivityReport;
