//! Problem specifications on disk: JSON documents naming a catalog loss, the
//! transport geometry, a baseline measure (inline or by file reference) and
//! optional calibration constraints.

use anyhow::{bail, Context, Result};
use nalgebra::DVector;
use serde::Deserialize;
use std::path::Path;
use wdro_core::measures::{ActiveCoords, DiscreteMeasure, MeasureJson, NormSpec, SupportSpec};
use wdro_core::problem::{builtin_loss, ConstraintSet, LossModel};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpecFile {
    pub loss: LossRef,
    pub norm: NormRef,
    pub p: f64,
    pub measure: MeasureRef,
    #[serde(default)]
    pub constraints: Vec<ConstraintRef>,
    #[serde(default)]
    pub support: Option<SupportSpec>,
    /// Initial action for solvers (defaults to the origin).
    #[serde(default)]
    pub a0: Option<Vec<f64>>,
    /// Supplied optimizer; skips the base solve when present.
    #[serde(default)]
    pub a_star: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
pub struct LossRef {
    pub id: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Deserialize)]
pub struct NormRef {
    pub s: f64,
    /// 0-based active coordinates; omit for the full norm.
    #[serde(default)]
    pub active: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum MeasureRef {
    Path(String),
    Inline(MeasureJson),
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConstraintRef {
    Martingale { x0: Vec<f64> },
    Covariance { b: f64 },
}

/// A fully resolved problem.
pub struct Problem {
    pub loss: LossModel,
    pub norm: NormSpec,
    pub measure: DiscreteMeasure,
    pub constraints: Option<ConstraintSet>,
    pub support: SupportSpec,
    pub a0: DVector<f64>,
    pub a_star: Option<DVector<f64>>,
}

pub fn load(path: &Path) -> Result<Problem> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading problem spec {}", path.display()))?;
    let spec: ProblemSpecFile =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    resolve(spec, path.parent().unwrap_or_else(|| Path::new(".")))
}

fn resolve(spec: ProblemSpecFile, base_dir: &Path) -> Result<Problem> {
    let loss = builtin_loss(&spec.loss.id, &spec.loss.params)?;
    let active = match spec.norm.active {
        None => ActiveCoords::All,
        Some(idx) => ActiveCoords::Subset(idx),
    };
    let norm = NormSpec::with_active(spec.norm.s, spec.p, active)?;
    norm.check_dim(loss.state_dim())?;
    let measure = match spec.measure {
        MeasureRef::Path(p) => {
            let full = base_dir.join(&p);
            DiscreteMeasure::read_path(&full)
                .with_context(|| format!("reading measure {}", full.display()))?
        }
        MeasureRef::Inline(json) => DiscreteMeasure::from_json(&json)?,
    };
    if measure.dim() != loss.state_dim() {
        bail!(
            "measure dimension {} does not match the loss state dimension {}",
            measure.dim(),
            loss.state_dim()
        );
    }
    let constraints = if spec.constraints.is_empty() {
        None
    } else {
        let mut all = Vec::new();
        for c in &spec.constraints {
            let set = match c {
                ConstraintRef::Martingale { x0 } => {
                    if x0.len() != measure.dim() {
                        bail!("martingale constraint x0 has wrong dimension");
                    }
                    ConstraintSet::martingale(DVector::from_column_slice(x0))
                }
                ConstraintRef::Covariance { b } => {
                    if measure.dim() != 2 {
                        bail!("covariance constraint needs a 2-dimensional state");
                    }
                    ConstraintSet::covariance(*b)
                }
            };
            all.extend(set.constraints().iter().cloned());
        }
        Some(ConstraintSet::new(all))
    };
    let a0 = match spec.a0 {
        Some(v) => {
            if v.len() != loss.action_dim() {
                bail!("a0 has wrong dimension");
            }
            DVector::from_column_slice(&v)
        }
        None => DVector::zeros(loss.action_dim()),
    };
    let a_star = match spec.a_star {
        Some(v) => {
            if v.len() != loss.action_dim() {
                bail!("a_star has wrong dimension");
            }
            Some(DVector::from_column_slice(&v))
        }
        None => None,
    };
    Ok(Problem {
        loss,
        norm,
        measure,
        constraints,
        support: spec.support.unwrap_or(SupportSpec::All),
        a0,
        a_star,
    })
}
