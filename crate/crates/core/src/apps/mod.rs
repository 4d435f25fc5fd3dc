//! Turnkey application experiments: robust call pricing, OCE and hedging
//! sensitivities, square-root LASSO/Ridge shrinkage, a neural-network
//! robustness metric, uncertainty-quantification expansions, and the
//! out-of-sample CLT study.

mod black_scholes;
mod clt;
mod nn;
mod oce;
mod regression;
mod uq;

pub use black_scholes::{
    bs_call_upsilon, bs_vega, call_upsilon_empirical, lognormal_quantile_measure, normal_cdf,
    normal_pdf, BlackScholesSpec,
};
pub use clt::{clt_study, CltLoss, CltReport, CltStudyConfig, SamplerSpec};
pub use nn::{nn_loss_model, nn_robustness, NnActivation, NnParams};
pub use oce::{avar_upsilon, hedging_upsilon, oce_sensitivities, OceProblem};
pub use regression::{exact_sqrt_regression, sqrt_regression_shrinkage, RegressionData};
pub use uq::{uq_first_order, ConvexTarget, SmoothMap, UqExpansion};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    BadInput(String),
    #[error("measure error: {0}")]
    Measure(#[from] crate::measures::MeasureError),
    #[error("norm error: {0}")]
    Norm(#[from] crate::measures::NormError),
    #[error("solve error: {0}")]
    Solve(#[from] crate::problem::SolveError),
    #[error("sensitivity error: {0}")]
    Sensitivity(#[from] crate::sensitivity::SensitivityError),
    #[error("oracle error: {0}")]
    Oracle(#[from] crate::oracle::OracleError),
}
