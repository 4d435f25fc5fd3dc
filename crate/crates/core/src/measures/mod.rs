//! Discrete probability measures on R^d, the seminorm family used for
//! transport costs, convex support sets, and an exact small-instance
//! Wasserstein distance.

mod norm;
mod transport;

pub use norm::{ActiveCoords, NormError, NormSpec};
pub use transport::{transport_lp, TransportError, TransportPlan};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Weights smaller than this are dropped at construction time; they would
/// otherwise produce degenerate columns in the transport LP.
const WEIGHT_PRUNE: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("empty measure")]
    Empty,
    #[error("atoms and weights must have equal length, got {atoms} vs {weights}")]
    LengthMismatch { atoms: usize, weights: usize },
    #[error("atom {0} has a non-finite coordinate")]
    NonFiniteAtom(usize),
    #[error("weight {idx} is negative: {value}")]
    NegativeWeight { idx: usize, value: f64 },
    #[error("weights sum to {0}, expected 1 within 1e-12")]
    BadTotalMass(f64),
    #[error("atom {idx} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        idx: usize,
        got: usize,
        expected: usize,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// A finitely supported probability measure: atoms in R^d with weights that
/// are nonnegative and sum to one.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        if atoms.is_empty() {
            return Err(MeasureError::Empty);
        }
        if atoms.len() != weights.len() {
            return Err(MeasureError::LengthMismatch {
                atoms: atoms.len(),
                weights: weights.len(),
            });
        }
        let dim = atoms[0].len();
        for (idx, a) in atoms.iter().enumerate() {
            if a.len() != dim {
                return Err(MeasureError::DimensionMismatch {
                    idx,
                    got: a.len(),
                    expected: dim,
                });
            }
            if a.iter().any(|c| !c.is_finite()) {
                return Err(MeasureError::NonFiniteAtom(idx));
            }
        }
        for (idx, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(MeasureError::NegativeWeight { idx, value: w });
            }
        }
        // Compensated summation: plain accumulation of 1e5 uniform weights
        // already drifts past the 1e-12 mass invariant.
        let total = kahan_sum(weights.iter().copied());
        if (total - 1.0).abs() > 1e-12 {
            return Err(MeasureError::BadTotalMass(total));
        }
        // Prune near-zero weights; only a lossy prune triggers renormalization
        // (bit-exact weights otherwise survive serialization round trips).
        let pruned = weights.iter().any(|&w| w < WEIGHT_PRUNE);
        let mut kept_atoms = Vec::with_capacity(atoms.len());
        let mut kept_weights = Vec::with_capacity(weights.len());
        for (a, w) in atoms.into_iter().zip(weights) {
            if w >= WEIGHT_PRUNE {
                kept_atoms.push(a);
                kept_weights.push(w);
            }
        }
        if kept_atoms.is_empty() {
            return Err(MeasureError::Empty);
        }
        if pruned {
            let kept_total = kahan_sum(kept_weights.iter().copied());
            for w in &mut kept_weights {
                *w /= kept_total;
            }
        }
        Ok(Self {
            atoms: kept_atoms,
            weights: kept_weights,
        })
    }

    /// Empirical measure: uniform weights `1/N` on the given samples,
    /// duplicates retained.
    pub fn make_empirical(samples: Vec<DVector<f64>>) -> Result<Self, MeasureError> {
        if samples.is_empty() {
            return Err(MeasureError::Empty);
        }
        let n = samples.len();
        Self::new(samples, vec![1.0 / n as f64; n])
    }

    /// Point mass at `x`.
    pub fn dirac(x: DVector<f64>) -> Self {
        Self {
            atoms: vec![x],
            weights: vec![1.0],
        }
    }

    pub fn from_scalars(points: &[f64], weights: &[f64]) -> Result<Self, MeasureError> {
        Self::new(
            points.iter().map(|&x| DVector::from_vec(vec![x])).collect(),
            weights.to_vec(),
        )
    }

    pub fn uniform_scalars(points: &[f64]) -> Result<Self, MeasureError> {
        Self::make_empirical(points.iter().map(|&x| DVector::from_vec(vec![x])).collect())
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn atoms(&self) -> &[DVector<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DVector<f64>, f64)> {
        self.atoms.iter().zip(self.weights.iter().copied())
    }

    /// `E_mu[g(X)]` with summation in atom order (bit-stable).
    pub fn integrate<F: Fn(&DVector<f64>) -> f64>(&self, g: F) -> f64 {
        self.iter().map(|(x, w)| w * g(x)).sum()
    }

    /// Vector-valued expectation, accumulated in atom order.
    pub fn integrate_vec<F: Fn(&DVector<f64>) -> DVector<f64>>(
        &self,
        out_dim: usize,
        g: F,
    ) -> DVector<f64> {
        let mut acc = DVector::zeros(out_dim);
        for (x, w) in self.iter() {
            acc += g(x) * w;
        }
        acc
    }

    pub fn mean(&self) -> DVector<f64> {
        self.integrate_vec(self.dim(), |x| x.clone())
    }

    /// Pushforward under `map` (weights unchanged).
    pub fn pushforward<F: Fn(&DVector<f64>) -> DVector<f64>>(
        &self,
        map: F,
    ) -> Result<Self, MeasureError> {
        Self::new(self.atoms.iter().map(map).collect(), self.weights.clone())
    }

    // ---- serialization -------------------------------------------------

    /// CSV: one atom per row, coordinates first, weight in the last column.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MeasureError> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for (x, weight) in self.iter() {
            let mut row: Vec<String> = x.iter().map(|c| format!("{c:.17e}")).collect();
            row.push(format!("{weight:.17e}"));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, MeasureError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(r);
        let mut atoms = Vec::new();
        let mut weights = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let vals: Vec<f64> = record
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| {
                    MeasureError::Io(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("bad float in measure csv: {e}"),
                    ))
                })?;
            if vals.len() < 2 {
                return Err(MeasureError::Io(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    "measure csv rows need at least one coordinate and a weight",
                )));
            }
            let (coords, w) = vals.split_at(vals.len() - 1);
            atoms.push(DVector::from_column_slice(coords));
            weights.push(w[0]);
        }
        Self::new(atoms, weights)
    }

    pub fn to_json(&self) -> MeasureJson {
        MeasureJson {
            atoms: self.atoms.iter().map(|a| a.iter().copied().collect()).collect(),
            weights: self.weights.clone(),
        }
    }

    pub fn from_json(json: &MeasureJson) -> Result<Self, MeasureError> {
        Self::new(
            json.atoms
                .iter()
                .map(|a| DVector::from_column_slice(a))
                .collect(),
            json.weights.clone(),
        )
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<(), MeasureError> {
        serde_json::to_writer(w, &self.to_json())?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self, MeasureError> {
        let json: MeasureJson = serde_json::from_reader(r)?;
        Self::from_json(&json)
    }

    /// Load from a path, dispatching on the `.json` / `.csv` extension.
    pub fn read_path(path: &Path) -> Result<Self, MeasureError> {
        let file = std::fs::File::open(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::read_json(file),
            _ => Self::read_csv(file),
        }
    }
}

/// JSON wire format: `{"atoms": [[...]], "weights": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureJson {
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// Neumaier-compensated summation.
fn kahan_sum<I: Iterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// The exact `p`-Wasserstein distance between two discrete measures with
/// transport cost `||x - y||_*^p` (dual seminorm), solved as a transportation
/// linear program.
///
/// Atom pairs whose dual-norm cost is infinite (they differ on an inactive
/// coordinate of the seminorm) cannot exchange mass; when that leaves no
/// feasible coupling the distance is `+inf`.
pub fn wasserstein_distance(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    norm: &NormSpec,
) -> Result<f64, TransportError> {
    transport::wasserstein_distance(mu, nu, norm)
}

/// Closed convex state spaces with exact membership tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SupportSpec {
    /// All of R^d.
    All,
    /// Axis-aligned box `[lo, hi]` (componentwise).
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Intersection of half-spaces `<normal_i, x> <= offset_i`.
    Halfspaces {
        normals: Vec<Vec<f64>>,
        offsets: Vec<f64>,
    },
}

impl SupportSpec {
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        match self {
            SupportSpec::All => true,
            SupportSpec::Box { lo, hi } => x
                .iter()
                .enumerate()
                .all(|(i, &c)| c >= lo[i] && c <= hi[i]),
            SupportSpec::Halfspaces { normals, offsets } => normals
                .iter()
                .zip(offsets)
                .all(|(n, &b)| dot(n, x) <= b),
        }
    }

    pub fn in_interior(&self, x: &DVector<f64>) -> bool {
        match self {
            SupportSpec::All => true,
            SupportSpec::Box { lo, hi } => {
                x.iter().enumerate().all(|(i, &c)| c > lo[i] && c < hi[i])
            }
            SupportSpec::Halfspaces { normals, offsets } => normals
                .iter()
                .zip(offsets)
                .all(|(n, &b)| dot(n, x) < b),
        }
    }

    /// Euclidean distance from an interior point to the complement; `+inf`
    /// for the full space, `0` outside.
    pub fn distance_to_boundary(&self, x: &DVector<f64>) -> f64 {
        match self {
            SupportSpec::All => f64::INFINITY,
            SupportSpec::Box { lo, hi } => {
                let mut d = f64::INFINITY;
                for (i, &c) in x.iter().enumerate() {
                    d = d.min(c - lo[i]).min(hi[i] - c);
                }
                d.max(0.0)
            }
            SupportSpec::Halfspaces { normals, offsets } => {
                let mut d = f64::INFINITY;
                for (n, &b) in normals.iter().zip(offsets) {
                    let nn = n.iter().map(|c| c * c).sum::<f64>().sqrt();
                    if nn > 0.0 {
                        d = d.min((b - dot(n, x)) / nn);
                    }
                }
                d.max(0.0)
            }
        }
    }

    /// Euclidean projection onto the set. Exact for boxes and single
    /// half-spaces; Dykstra iterations for half-space intersections.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            SupportSpec::All => x.clone(),
            SupportSpec::Box { lo, hi } => DVector::from_fn(x.len(), |i, _| {
                x[i].clamp(lo[i], hi[i])
            }),
            SupportSpec::Halfspaces { normals, offsets } => {
                if normals.len() == 1 {
                    return project_halfspace(x, &normals[0], offsets[0]);
                }
                // Dykstra's alternating projections.
                let mut y = x.clone();
                let mut corrections = vec![DVector::zeros(x.len()); normals.len()];
                for _ in 0..200 {
                    let mut max_move = 0.0_f64;
                    for (j, (n, &b)) in normals.iter().zip(offsets).enumerate() {
                        let z = &y + &corrections[j];
                        let projected = project_halfspace(&z, n, b);
                        corrections[j] = &z - &projected;
                        max_move = max_move.max((&projected - &y).norm());
                        y = projected;
                    }
                    if max_move < 1e-13 {
                        break;
                    }
                }
                y
            }
        }
    }
}

fn dot(n: &[f64], x: &DVector<f64>) -> f64 {
    n.iter().zip(x.iter()).map(|(a, b)| a * b).sum()
}

fn project_halfspace(x: &DVector<f64>, n: &[f64], b: f64) -> DVector<f64> {
    let nx = dot(n, x);
    if nx <= b {
        return x.clone();
    }
    let nn: f64 = n.iter().map(|c| c * c).sum();
    if nn == 0.0 {
        return x.clone();
    }
    let t = (nx - b) / nn;
    DVector::from_fn(x.len(), |i, _| x[i] - t * n[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empirical_is_uniform_and_keeps_duplicates() {
        let m = DiscreteMeasure::uniform_scalars(&[0.0, 2.0]).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.weights(), &[0.5, 0.5]);

        let single = DiscreteMeasure::make_empirical(vec![DVector::from_vec(vec![1.0, 1.0])])
            .unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.weights(), &[1.0]);

        let dup = DiscreteMeasure::uniform_scalars(&[1.0, 1.0, 3.0]).unwrap();
        assert_eq!(dup.len(), 3);
    }

    #[test]
    fn empty_measure_is_rejected() {
        assert!(matches!(
            DiscreteMeasure::make_empirical(vec![]),
            Err(MeasureError::Empty)
        ));
    }

    #[test]
    fn invariants_are_enforced() {
        let atoms = vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![1.0])];
        assert!(DiscreteMeasure::new(atoms.clone(), vec![0.7, 0.4]).is_err());
        assert!(DiscreteMeasure::new(atoms.clone(), vec![-0.1, 1.1]).is_err());
        assert!(
            DiscreteMeasure::new(vec![DVector::from_vec(vec![f64::NAN])], vec![1.0]).is_err()
        );
        assert!(DiscreteMeasure::new(atoms, vec![0.5]).is_err());
    }

    #[test]
    fn tiny_weights_are_pruned() {
        let atoms = vec![
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![2.0]),
        ];
        let m = DiscreteMeasure::new(atoms, vec![0.5, 1e-16, 0.5 - 1e-16 + 1e-16]).unwrap();
        assert_eq!(m.len(), 2);
        let total: f64 = m.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn csv_and_json_round_trip() {
        let m = DiscreteMeasure::new(
            vec![
                DVector::from_vec(vec![0.25, -1.5]),
                DVector::from_vec(vec![2.0, 0.125]),
            ],
            vec![0.375, 0.625],
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = DiscreteMeasure::read_csv(buf.as_slice()).unwrap();
        assert_eq!(m, back);

        let mut jbuf = Vec::new();
        m.write_json(&mut jbuf).unwrap();
        let back = DiscreteMeasure::read_json(jbuf.as_slice()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn support_membership_and_projection() {
        let b = SupportSpec::Box {
            lo: vec![-1.0, -1.0],
            hi: vec![1.0, 1.0],
        };
        let inside = DVector::from_vec(vec![0.2, -0.9]);
        let outside = DVector::from_vec(vec![2.0, 0.0]);
        assert!(b.contains(&inside) && b.in_interior(&inside));
        assert!(!b.contains(&outside));
        assert_eq!(b.project(&outside), DVector::from_vec(vec![1.0, 0.0]));
        assert!((b.distance_to_boundary(&inside) - 0.1).abs() < 1e-15);

        let h = SupportSpec::Halfspaces {
            normals: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            offsets: vec![0.0, 0.0],
        };
        let p = h.project(&DVector::from_vec(vec![3.0, 2.0]));
        assert!(p[0].abs() < 1e-10 && p[1].abs() < 1e-10);
        assert!(h.contains(&DVector::from_vec(vec![-0.5, -0.5])));
    }
}
