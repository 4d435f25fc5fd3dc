//! Subcommand implementations. Every command is deterministic given the spec
//! and seed, numbers land in CSV with 17 significant digits, and each output
//! file records the seed that produced it.

use crate::spec::Problem;
use anyhow::{anyhow, bail, Context, Result};
use nalgebra::DVector;
use std::fmt::Write as _;
use std::path::Path;
use wdro_core::apps;
use wdro_core::oracle::{
    eval_dual, eval_primal_lowerbound, fd_optimizer_slope, fd_value_slope, robust_optimize,
    OracleConfig,
};
use wdro_core::problem::{solve_base_problem, OptimizerCertificate, SolveConfig};
use wdro_core::sensitivity;

/// Failures after input validation succeeded; mapped to exit code 3.
#[derive(Debug)]
pub struct NumericalFailure(pub anyhow::Error);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for NumericalFailure {}

fn numerical<E: Into<anyhow::Error>>(e: E) -> anyhow::Error {
    anyhow::Error::new(NumericalFailure(e.into()))
}

pub struct RunConfig {
    pub out: std::path::PathBuf,
    pub seed: u64,
    pub deltas: Vec<f64>,
    pub tol: Option<f64>,
}

impl RunConfig {
    pub fn oracle_config(&self) -> OracleConfig {
        let mut cfg = OracleConfig {
            seed: self.seed,
            ..OracleConfig::default()
        };
        if let Some(t) = self.tol {
            cfg.tol_rel = t;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.deltas.is_empty()
            || self.deltas.iter().any(|&d| d <= 0.0)
            || self.deltas.windows(2).any(|w| w[0] <= w[1])
        {
            bail!("--deltas must be a positive, strictly decreasing list");
        }
        Ok(())
    }
}

fn f17(x: f64) -> String {
    format!("{x:.17e}")
}

fn vec_json(v: &DVector<f64>) -> serde_json::Value {
    serde_json::json!(v.iter().copied().collect::<Vec<f64>>())
}

fn write_out(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_out(path, &text)
}

fn solve_or_supplied(problem: &Problem) -> Result<OptimizerCertificate> {
    match &problem.a_star {
        Some(a) => Ok(OptimizerCertificate::supplied(a.clone())),
        None => solve_base_problem(
            &problem.loss,
            &problem.measure,
            &problem.a0,
            &SolveConfig::default(),
        )
        .map_err(numerical),
    }
}

pub fn cmd_upsilon(problem: &Problem, cfg: &RunConfig) -> Result<()> {
    let cert = solve_or_supplied(problem)?;
    let report = match &problem.constraints {
        Some(cs) => sensitivity::upsilon_constrained(
            &problem.loss,
            &problem.measure,
            &problem.norm,
            cs,
            &cert,
        )
        .map_err(numerical)?,
        None => sensitivity::upsilon(
            &problem.loss,
            &problem.measure,
            &problem.norm,
            std::slice::from_ref(&cert),
        )
        .map_err(numerical)?,
    };
    let mut json = report.to_json();
    json["seed"] = serde_json::json!(cfg.seed);
    json["constrained"] = serde_json::json!(problem.constraints.is_some());
    write_json(&cfg.out.join("upsilon.json"), &json)?;
    println!(
        "value sensitivity: {}{}",
        f17(report.upsilon),
        if problem.constraints.is_some() {
            " (constrained)"
        } else {
            ""
        }
    );
    println!("at action: {:?}", report.a_star.as_slice());
    if let Some(lambda) = &report.lambda_star {
        println!("multipliers: {:?}", lambda.as_slice());
    }
    Ok(())
}

pub fn cmd_beth(problem: &Problem, cfg: &RunConfig) -> Result<()> {
    let cert = solve_or_supplied(problem)?;
    let report = sensitivity::beth(&problem.loss, &problem.measure, &problem.norm, &cert)
        .map_err(numerical)?;
    let mut json = report.to_json();
    json["seed"] = serde_json::json!(cfg.seed);
    write_json(&cfg.out.join("beth.json"), &json)?;
    let b = report.beth.as_ref().expect("beth computed");
    println!("optimizer sensitivity: {:?}", b.as_slice());
    println!("value sensitivity:     {}", f17(report.upsilon));
    println!(
        "hessian condition:     {}",
        report.integrals.hess_condition.unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn cmd_oracle(problem: &Problem, cfg: &RunConfig) -> Result<()> {
    let oracle_cfg = cfg.oracle_config();
    let mut trace = String::from("delta,value,lambda_star,budget");
    for i in 0..problem.loss.action_dim() {
        let _ = write!(trace, ",a{i}");
    }
    trace.push('\n');
    let mut warm = problem.a0.clone();
    let mut last = None;
    for &delta in &cfg.deltas {
        let cert = robust_optimize(
            &problem.loss,
            &problem.measure,
            &problem.norm,
            delta,
            &warm,
            &problem.support,
            &oracle_cfg,
        )
        .map_err(numerical)?;
        warm = cert.action.clone();
        let eval = eval_dual(
            &problem.loss,
            &problem.measure,
            &problem.norm,
            delta,
            &cert.action,
            &problem.support,
            &oracle_cfg,
        )
        .map_err(numerical)?;
        let _ = write!(
            trace,
            "{},{},{},{}",
            f17(delta),
            f17(eval.value),
            f17(eval.lambda_star),
            f17(eval.budget)
        );
        for c in cert.action.iter() {
            let _ = write!(trace, ",{}", f17(*c));
        }
        trace.push('\n');
        println!(
            "delta {delta}: V = {} at a = {:?}",
            f17(eval.value),
            cert.action.as_slice()
        );
        last = Some((delta, cert, eval));
    }
    write_out(&cfg.out.join("oracle_trace.csv"), &trace)?;
    if let Some((delta, cert, eval)) = last {
        let json = serde_json::json!({
            "delta": delta,
            "value": eval.value,
            "lambda_star": eval.lambda_star,
            "budget": eval.budget,
            "gap": eval.gap,
            "action": vec_json(&cert.action),
            "displaced_atoms": eval
                .displaced_atoms
                .iter()
                .map(|a| a.iter().copied().collect::<Vec<f64>>())
                .collect::<Vec<_>>(),
            "seed": eval.seed,
        });
        write_json(&cfg.out.join("oracle.json"), &json)?;
    }
    Ok(())
}

pub fn cmd_validate(problem: &Problem, cfg: &RunConfig) -> Result<()> {
    if problem.norm.p() <= 1.0 {
        bail!(
            "validation needs transport order p > 1: the first-order value formula can fail \
             at p = 1 (a quadratic loss at a point mass has V(delta) = delta while the \
             formula reports 0)"
        );
    }
    let oracle_cfg = cfg.oracle_config();
    let cert = solve_or_supplied(problem)?;
    let ups = sensitivity::upsilon(
        &problem.loss,
        &problem.measure,
        &problem.norm,
        std::slice::from_ref(&cert),
    )
    .map_err(numerical)?
    .upsilon;
    let beth = sensitivity::beth(&problem.loss, &problem.measure, &problem.norm, &cert)
        .map_err(numerical)?
        .beth
        .expect("beth computed");
    let vslope = fd_value_slope(
        &problem.loss,
        &problem.measure,
        &problem.norm,
        &cert,
        &cfg.deltas,
        &problem.support,
        &oracle_cfg,
    )
    .map_err(numerical)?;
    let oslope = fd_optimizer_slope(
        &problem.loss,
        &problem.measure,
        &problem.norm,
        &problem.a0,
        &cfg.deltas,
        &problem.support,
        &oracle_cfg,
    )
    .map_err(numerical)?;
    let mid_delta = cfg.deltas[cfg.deltas.len() / 2];
    let dual = eval_dual(
        &problem.loss,
        &problem.measure,
        &problem.norm,
        mid_delta,
        &cert.action,
        &problem.support,
        &oracle_cfg,
    )
    .map_err(numerical)?;
    let lower = eval_primal_lowerbound(
        &problem.loss,
        &problem.measure,
        &problem.norm,
        mid_delta,
        &cert.action,
        &problem.support,
    )
    .map_err(numerical)?;

    let ups_gap = (vslope.slope - ups).abs() / ups.max(1e-12);
    let beth_gap = (oslope.slope.clone() - &beth).amax() / (1.0 + beth.amax());
    let bracket_gap = (lower - dual.value).max(0.0) / (1.0 + dual.value.abs());
    let rows = [
        ("value sensitivity", ups, vslope.slope, ups_gap, 0.02),
        (
            "optimizer sensitivity (sup gap)",
            beth.amax(),
            oslope.slope.amax(),
            beth_gap,
            0.05,
        ),
        (
            "primal<=dual bracket",
            lower,
            dual.value,
            bracket_gap,
            1e-7,
        ),
    ];
    println!(
        "{:<34} {:>22} {:>22} {:>12} {:>6}",
        "check", "formula", "oracle", "rel gap", "state"
    );
    let mut all_ok = true;
    for (name, formula, oracle, gap, tol) in rows {
        let ok = gap <= tol;
        all_ok &= ok;
        println!(
            "{name:<34} {:>22} {:>22} {gap:>12.3e} {:>6}",
            f17(formula),
            f17(oracle),
            if ok { "pass" } else { "FAIL" }
        );
    }
    let json = serde_json::json!({
        "upsilon": ups,
        "fd_value_slope": vslope.slope,
        "beth": beth.iter().copied().collect::<Vec<f64>>(),
        "fd_optimizer_slope": oslope.slope.iter().copied().collect::<Vec<f64>>(),
        "bracket": {"primal": lower, "dual": dual.value, "delta": mid_delta},
        "secants": vslope
            .secants
            .iter()
            .map(|(d, v, s)| serde_json::json!({"delta": d, "value": v, "secant": s}))
            .collect::<Vec<_>>(),
        "seed": cfg.seed,
        "pass": all_ok,
    });
    write_json(&cfg.out.join("validate.json"), &json)?;
    if !all_ok {
        return Err(numerical(anyhow!("oracle-vs-formula validation failed")));
    }
    Ok(())
}

pub fn cmd_figures(cfg: &RunConfig) -> Result<()> {
    let mut failures = Vec::new();
    if let Err(e) = figure_bs_value(cfg) {
        eprintln!("figure 1 failed: {e}");
        failures.push("fig1");
    }
    if let Err(e) = figure_upsilon_vega(cfg) {
        eprintln!("figure 2 failed: {e}");
        failures.push("fig2");
    }
    if let Err(e) = figure_lasso(cfg) {
        eprintln!("figure 3 failed: {e}");
        failures.push("fig3");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(numerical(anyhow!(
            "figures failed: {}",
            failures.join(", ")
        )))
    }
}

/// Robust call value against its first-order expansion on the discretized
/// lognormal return (unconstrained transport ball; the radius-zero slope is
/// the tail-mass formula `s0 sqrt(mu_k)`).
fn figure_bs_value(cfg: &RunConfig) -> Result<()> {
    let oracle_cfg = cfg.oracle_config();
    let s0 = 1.0;
    let strike = 1.2;
    let mu = apps::lognormal_quantile_measure(0.2, 1.0, 300)?;
    let loss = wdro_core::problem::call_payoff(s0, strike);
    let a = DVector::zeros(1);
    let v0 = mu.integrate(|x| loss.value(x, &a));
    let mu_k: f64 = mu
        .iter()
        .filter(|(x, _)| x[0] >= strike / s0)
        .map(|(_, w)| w)
        .sum();
    let ups = s0 * mu_k.sqrt();
    let mut csv = String::from("delta,robust_value,first_order\n");
    let _ = writeln!(csv, "{},{},{}", f17(0.0), f17(v0), f17(v0));
    for i in 1..=20 {
        let delta = 0.005 * i as f64;
        let value = eval_dual(
            &loss,
            &mu,
            &problem_norm(),
            delta,
            &a,
            &wdro_core::measures::SupportSpec::All,
            &oracle_cfg,
        )
        .map_err(numerical)?
        .value;
        let _ = writeln!(
            csv,
            "{},{},{}",
            f17(delta),
            f17(value),
            f17(sensitivity::first_order_value(v0, ups, delta))
        );
    }
    write_out(&cfg.out.join("fig1_bs.csv"), &csv)
}

fn problem_norm() -> wdro_core::measures::NormSpec {
    wdro_core::measures::NormSpec::euclidean(2.0).expect("euclidean norm")
}

/// Value sensitivity vs Vega across strikes.
fn figure_upsilon_vega(cfg: &RunConfig) -> Result<()> {
    let mut csv = String::from("strike,upsilon,vega\n");
    for i in 0..=100 {
        let strike = 0.5 + i as f64 * 0.01;
        let spec = apps::BlackScholesSpec::new(1.0, strike, 1.0, 0.2, 1)?;
        let _ = writeln!(
            csv,
            "{},{},{}",
            f17(strike),
            f17(apps::bs_call_upsilon(&spec)),
            f17(apps::bs_vega(&spec))
        );
    }
    write_out(&cfg.out.join("fig2_upsilon_vega.csv"), &csv)
}

/// Square-root LASSO shrinkage per coordinate: exact vs first order.
fn figure_lasso(cfg: &RunConfig) -> Result<()> {
    let sampler = apps::SamplerSpec::LinearModel {
        coefs: vec![1.5, -3.0, -2.0, 0.3, -0.5, -0.7, 0.2, 0.5, 1.2, 0.8],
        noise_sd: 1.0,
    };
    let data = apps::RegressionData::new(sampler.draw_with_seed(2000, cfg.seed), 10)?;
    let delta = 0.1;
    let (a_star, first_order) = apps::sqrt_regression_shrinkage(&data, 1.0, delta)?;
    let exact = apps::exact_sqrt_regression(&data, 1.0, delta).map_err(numerical)?;
    let mut csv = String::from("coordinate,a_star,shift_exact,shift_first_order\n");
    for i in 0..10 {
        let _ = writeln!(
            csv,
            "{i},{},{},{}",
            f17(a_star[i]),
            f17(exact[i] - a_star[i]),
            f17(first_order[i] - a_star[i])
        );
    }
    write_out(&cfg.out.join("fig3_lasso.csv"), &csv)
}

pub fn cmd_clt(
    cfg: &RunConfig,
    kind: &str,
    n: usize,
    m: usize,
    reference_size: usize,
) -> Result<()> {
    let config = match kind {
        "tracking" => apps::CltStudyConfig {
            sampler: apps::SamplerSpec::GaussianScalar { mean: 0.5, sd: 1.0 },
            loss: apps::CltLoss::QuadraticTracking,
            n,
            m,
            seed: cfg.seed,
            reference_size,
        },
        "regression" => apps::CltStudyConfig {
            sampler: apps::SamplerSpec::LinearModel {
                coefs: vec![1.0, -0.7],
                noise_sd: 1.0,
            },
            loss: apps::CltLoss::SqrtRegression { s: 2.0 },
            n,
            m,
            seed: cfg.seed,
            reference_size,
        },
        other => bail!("unknown study kind {other:?} (expected tracking or regression)"),
    };
    let report = apps::clt_study(&config).map_err(numerical)?;
    write_json(&cfg.out.join("clt_report.json"), &report.to_json())?;
    println!(
        "replications {} (failures {}), scaled deviation mean {:?}",
        report.m,
        report.failures,
        report.mean_scaled_deviation.as_slice()
    );
    println!(
        "predicted shift {:?}, z-scores {:?}",
        report.predicted_shift.as_slice(),
        report.z_scores.as_slice()
    );
    println!(
        "out-of-sample error (scaled by N): empirical {} vs predicted {}",
        f17(report.oos_scaled_mean),
        f17(report.oos_predicted)
    );
    Ok(())
}
