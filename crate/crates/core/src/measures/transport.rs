//! Exact transportation linear program (MODI / u-v method on a spanning-tree
//! basis) and the discrete Wasserstein distance built on it.
//!
//! No entropic smoothing: the LP is the ground truth the rest of the crate is
//! tested against, so it must not inherit regularization bias. Optimality is
//! certified by the returned potentials (`u_i + v_j <= c_ij` on every arc).

use super::norm::{ls_norm, NormSpec};
use super::DiscreteMeasure;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("transport instance must be balanced: supply {0} vs demand {1}")]
    Unbalanced(f64, f64),
    #[error("transport instance too large: {0} x {1} (cap 500 x 500)")]
    TooLarge(usize, usize),
    #[error("measures live in different dimensions: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("degenerate transport instance (empty side)")]
    Degenerate,
    #[error("transportation simplex failed to terminate")]
    NoConvergence,
}

/// Optimal coupling for a balanced transportation problem.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// Optimal total cost `sum flow_ij * cost_ij`.
    pub cost: f64,
    /// Nonzero flows `(source, sink, mass)`.
    pub flows: Vec<(usize, usize, f64)>,
    /// Dual potentials for the sources; `u_i + v_j <= c_ij` certifies optimality.
    pub potentials_u: Vec<f64>,
    /// Dual potentials for the sinks.
    pub potentials_v: Vec<f64>,
}

/// Solve `min sum c_ij x_ij` subject to row sums = `supply`, column sums =
/// `demand`, `x >= 0`, by the transportation simplex.
///
/// `cost` is row-major with `supply.len()` rows and `demand.len()` columns and
/// must be finite. Supplies and demands must be nonnegative and balanced.
pub fn transport_lp(
    cost: &[f64],
    supply: &[f64],
    demand: &[f64],
) -> Result<TransportPlan, TransportError> {
    let m = supply.len();
    let n = demand.len();
    if m == 0 || n == 0 {
        return Err(TransportError::Degenerate);
    }
    if m > 500 || n > 500 {
        return Err(TransportError::TooLarge(m, n));
    }
    assert_eq!(cost.len(), m * n, "cost matrix shape mismatch");
    let total_s: f64 = supply.iter().sum();
    let total_d: f64 = demand.iter().sum();
    if (total_s - total_d).abs() > 1e-9 * (1.0 + total_s.abs()) {
        return Err(TransportError::Unbalanced(total_s, total_d));
    }
    // Rescale demand so the instance balances exactly.
    let scale = if total_d > 0.0 { total_s / total_d } else { 1.0 };
    let demand: Vec<f64> = demand.iter().map(|&d| d * scale).collect();

    let mut state = Simplex::new(cost, supply, &demand);
    state.northwest_init();
    let cost_scale = 1.0 + cost.iter().fold(0.0_f64, |a, &c| a.max(c.abs()));
    let tol = 1e-12 * cost_scale;
    let max_pivots = 200 * (m + n) * (m + n) + 1000;
    let bland_after = 20 * (m + n);
    for pivot in 0..max_pivots {
        state.compute_potentials();
        let entering = state.find_entering(tol, pivot >= bland_after);
        let Some((ei, ej)) = entering else {
            return Ok(state.into_plan());
        };
        state.pivot(ei, ej);
    }
    Err(TransportError::NoConvergence)
}

struct Simplex<'a> {
    m: usize,
    n: usize,
    cost: &'a [f64],
    flow: Vec<f64>,
    basic: Vec<bool>,
    row_adj: Vec<Vec<usize>>, // basic columns per row
    col_adj: Vec<Vec<usize>>, // basic rows per column
    u: Vec<f64>,
    v: Vec<f64>,
    supply: Vec<f64>,
    demand: Vec<f64>,
}

impl<'a> Simplex<'a> {
    fn new(cost: &'a [f64], supply: &[f64], demand: &[f64]) -> Self {
        let m = supply.len();
        let n = demand.len();
        Simplex {
            m,
            n,
            cost,
            flow: vec![0.0; m * n],
            basic: vec![false; m * n],
            row_adj: vec![Vec::new(); m],
            col_adj: vec![Vec::new(); n],
            u: vec![0.0; m],
            v: vec![0.0; n],
            supply: supply.to_vec(),
            demand: demand.to_vec(),
        }
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.n + j
    }

    fn add_basic(&mut self, i: usize, j: usize) {
        let k = self.idx(i, j);
        if !self.basic[k] {
            self.basic[k] = true;
            self.row_adj[i].push(j);
            self.col_adj[j].push(i);
        }
    }

    fn remove_basic(&mut self, i: usize, j: usize) {
        let k = self.idx(i, j);
        self.basic[k] = false;
        self.row_adj[i].retain(|&c| c != j);
        self.col_adj[j].retain(|&r| r != i);
    }

    /// Northwest-corner initial basic feasible solution: exactly `m + n - 1`
    /// basic cells, zero-flow cells kept basic on degenerate ties.
    fn northwest_init(&mut self) {
        let mut rem_s = self.supply.clone();
        let mut rem_d = self.demand.clone();
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let t = rem_s[i].min(rem_d[j]).max(0.0);
            let k = self.idx(i, j);
            self.flow[k] = t;
            self.add_basic(i, j);
            rem_s[i] -= t;
            rem_d[j] -= t;
            if i == self.m - 1 && j == self.n - 1 {
                break;
            }
            // Advance whichever side is exhausted; prefer the row on ties so
            // every step adds exactly one basic cell.
            if i < self.m - 1 && (rem_s[i] <= rem_d[j] || j == self.n - 1) {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    /// Solve `u_i + v_j = c_ij` over the basic spanning tree (u_0 = 0).
    fn compute_potentials(&mut self) {
        let m = self.m;
        let mut seen_row = vec![false; m];
        let mut seen_col = vec![false; self.n];
        // Node stack: rows are 0..m, columns are m..m+n.
        let mut stack = vec![0usize];
        self.u[0] = 0.0;
        seen_row[0] = true;
        while let Some(node) = stack.pop() {
            if node < m {
                let i = node;
                for &j in &self.row_adj[i] {
                    if !seen_col[j] {
                        seen_col[j] = true;
                        self.v[j] = self.cost[self.idx(i, j)] - self.u[i];
                        stack.push(m + j);
                    }
                }
            } else {
                let j = node - m;
                for &i in &self.col_adj[j] {
                    if !seen_row[i] {
                        seen_row[i] = true;
                        self.u[i] = self.cost[self.idx(i, j)] - self.v[j];
                        stack.push(i);
                    }
                }
            }
        }
        debug_assert!(
            seen_row.iter().all(|&s| s) && seen_col.iter().all(|&s| s),
            "basis is not a spanning tree"
        );
    }

    /// Most-negative reduced cost (Dantzig) or first-by-index (Bland, used
    /// after many pivots to rule out cycling on degenerate bases).
    fn find_entering(&self, tol: f64, bland: bool) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize)> = None;
        let mut best_rc = -tol;
        for i in 0..self.m {
            for j in 0..self.n {
                let k = self.idx(i, j);
                if self.basic[k] {
                    continue;
                }
                let rc = self.cost[k] - self.u[i] - self.v[j];
                if rc < best_rc {
                    if bland {
                        return Some((i, j));
                    }
                    best_rc = rc;
                    best = Some((i, j));
                }
            }
        }
        best
    }

    /// The unique alternating path row(ei) -> ... -> col(ej) through the
    /// basic tree, returned as the list of basic cells along it.
    fn tree_path(&self, ei: usize, ej: usize) -> Vec<(usize, usize)> {
        let m = self.m;
        let total = m + self.n;
        let mut parent_edge: Vec<Option<(usize, usize)>> = vec![None; total];
        let mut parent_node: Vec<usize> = vec![usize::MAX; total];
        let mut seen = vec![false; total];
        let mut stack = vec![ei];
        seen[ei] = true;
        while let Some(node) = stack.pop() {
            if node == m + ej {
                break;
            }
            if node < m {
                let i = node;
                for &j in &self.row_adj[i] {
                    let nxt = m + j;
                    if !seen[nxt] {
                        seen[nxt] = true;
                        parent_edge[nxt] = Some((i, j));
                        parent_node[nxt] = node;
                        stack.push(nxt);
                    }
                }
            } else {
                let j = node - m;
                for &i in &self.col_adj[j] {
                    if !seen[i] {
                        seen[i] = true;
                        parent_edge[i] = Some((i, j));
                        parent_node[i] = node;
                        stack.push(i);
                    }
                }
            }
        }
        let mut path = Vec::new();
        let mut node = m + ej;
        while node != ei {
            let edge = parent_edge[node].expect("entering arc closes a unique tree cycle");
            path.push(edge);
            node = parent_node[node];
        }
        path.reverse(); // now runs row(ei) -> col(ej)
        path
    }

    fn pivot(&mut self, ei: usize, ej: usize) {
        let path = self.tree_path(ei, ej);
        // Signs alternate along the path starting with '-' on the first cell
        // (it shares row ei with the entering '+' cell).
        let minus: Vec<(usize, usize)> = path.iter().copied().step_by(2).collect();
        let plus: Vec<(usize, usize)> = path.iter().copied().skip(1).step_by(2).collect();
        let mut theta = f64::INFINITY;
        let mut leaving = minus[0];
        for &(i, j) in &minus {
            let f = self.flow[self.idx(i, j)];
            if f < theta {
                theta = f;
                leaving = (i, j);
            }
        }
        let theta = theta.max(0.0);
        let ek = self.idx(ei, ej);
        self.flow[ek] += theta;
        for &(i, j) in &plus {
            let k = self.idx(i, j);
            self.flow[k] += theta;
        }
        for &(i, j) in &minus {
            let k = self.idx(i, j);
            self.flow[k] = (self.flow[k] - theta).max(0.0);
        }
        self.add_basic(ei, ej);
        self.remove_basic(leaving.0, leaving.1);
    }

    fn into_plan(mut self) -> TransportPlan {
        self.compute_potentials();
        let mut cost = 0.0;
        let mut flows = Vec::new();
        for i in 0..self.m {
            for j in 0..self.n {
                let f = self.flow[self.idx(i, j)];
                if f > 0.0 {
                    cost += f * self.cost[self.idx(i, j)];
                    flows.push((i, j, f));
                }
            }
        }
        TransportPlan {
            cost,
            flows,
            potentials_u: self.u,
            potentials_v: self.v,
        }
    }
}

/// See [`crate::measures::wasserstein_distance`].
pub(super) fn wasserstein_distance(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    norm: &NormSpec,
) -> Result<f64, TransportError> {
    if mu.dim() != nu.dim() {
        return Err(TransportError::DimensionMismatch(mu.dim(), nu.dim()));
    }
    let dim = mu.dim();
    let active = norm.active_indices(dim);
    let inactive: Vec<usize> = (0..dim).filter(|i| !active.contains(i)).collect();
    let p = norm.p();
    let r = norm.r();

    // Mass may only move within the active subspace: atoms that differ on an
    // inactive coordinate cannot exchange mass. Group atoms by their inactive
    // coordinates (bit-exact) and transport within each group.
    let key = |x: &nalgebra::DVector<f64>| -> Vec<u64> {
        inactive.iter().map(|&i| x[i].to_bits()).collect()
    };
    let mut groups: BTreeMap<Vec<u64>, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, x) in mu.atoms().iter().enumerate() {
        groups.entry(key(x)).or_default().0.push(i);
    }
    for (j, y) in nu.atoms().iter().enumerate() {
        groups.entry(key(y)).or_default().1.push(j);
    }

    let mut total_cost = 0.0;
    for (rows, cols) in groups.values() {
        let supply: Vec<f64> = rows.iter().map(|&i| mu.weights()[i]).collect();
        let demand: Vec<f64> = cols.iter().map(|&j| nu.weights()[j]).collect();
        let s: f64 = supply.iter().sum();
        let d: f64 = demand.iter().sum();
        if (s - d).abs() > 1e-9 {
            // Mass is stranded on a slice of the inactive subspace.
            return Ok(f64::INFINITY);
        }
        if rows.is_empty() || cols.is_empty() {
            continue;
        }
        let mut cost = Vec::with_capacity(rows.len() * cols.len());
        for &i in rows {
            for &j in cols {
                let diff_r = ls_norm(
                    active
                        .iter()
                        .map(|&c| mu.atoms()[i][c] - nu.atoms()[j][c]),
                    r,
                );
                cost.push(diff_r.powf(p));
            }
        }
        total_cost += transport_lp(&cost, &supply, &demand)?.cost;
    }
    Ok(total_cost.powf(1.0 / p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::ActiveCoords;
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Monotone (quantile) coupling: the exact 1-d optimal transport cost for
    /// convex costs |x-y|^p. Independent check of the LP.
    fn quantile_cost_1d(mu: &DiscreteMeasure, nu: &DiscreteMeasure, p: f64) -> f64 {
        let mut a: Vec<(f64, f64)> = mu.iter().map(|(x, w)| (x[0], w)).collect();
        let mut b: Vec<(f64, f64)> = nu.iter().map(|(x, w)| (x[0], w)).collect();
        a.sort_by(|x, y| x.0.total_cmp(&y.0));
        b.sort_by(|x, y| x.0.total_cmp(&y.0));
        let (mut i, mut j, mut cost) = (0usize, 0usize, 0.0);
        let (mut ra, mut rb) = (a[0].1, b[0].1);
        loop {
            let chunk = ra.min(rb);
            cost += chunk * (a[i].0 - b[j].0).abs().powf(p);
            ra -= chunk;
            rb -= chunk;
            if ra <= 1e-15 {
                i += 1;
                if i == a.len() {
                    break;
                }
                ra = a[i].1;
            }
            if rb <= 1e-15 {
                j += 1;
                if j == b.len() {
                    break;
                }
                rb = b[j].1;
            }
        }
        cost
    }

    fn random_measure(rng: &mut ChaCha8Rng, max_atoms: usize, dim: usize) -> DiscreteMeasure {
        let n = rng.gen_range(1..=max_atoms);
        let atoms = (0..n)
            .map(|_| DVector::from_fn(dim, |_, _| rng.gen_range(-3.0..3.0)))
            .collect();
        let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let t: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= t);
        DiscreteMeasure::new(atoms, w).unwrap()
    }

    #[test]
    fn identical_measures_have_zero_distance() {
        let norm = NormSpec::euclidean(2.0).unwrap();
        let m = DiscreteMeasure::uniform_scalars(&[0.5, 1.5, -2.0]).unwrap();
        let d = wasserstein_distance(&m, &m, &norm).unwrap();
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn point_masses_give_dual_norm() {
        let norm = NormSpec::new(1.5, 2.5).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let y = DVector::from_vec(vec![0.0, 1.0]);
        let d = wasserstein_distance(
            &DiscreteMeasure::dirac(x.clone()),
            &DiscreteMeasure::dirac(y.clone()),
            &norm,
        )
        .unwrap();
        assert!((d - norm.dual_norm(&(x - y))).abs() < 1e-12);
    }

    // Enumerable 2x2 instance; the unique optimal coupling keeps the shared
    // atom in place and moves mass 1/2 from 1 to 2, so W_2^2 = 1/2.
    #[test]
    fn two_atom_example_matches_enumeration() {
        let norm = NormSpec::new(1.0, 2.0).unwrap();
        let mu = DiscreteMeasure::uniform_scalars(&[0.0, 1.0]).unwrap();
        let nu = DiscreteMeasure::uniform_scalars(&[0.0, 2.0]).unwrap();
        let d = wasserstein_distance(&mu, &nu, &norm).unwrap();
        assert!((d - 0.5_f64.sqrt()).abs() < 1e-12, "got {d}");
    }

    #[test]
    fn lp_agrees_with_quantile_coupling_in_1d() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in [1.0, 2.0, 3.0] {
            let norm = NormSpec::euclidean(p).unwrap();
            for _ in 0..60 {
                let mu = random_measure(&mut rng, 8, 1);
                let nu = random_measure(&mut rng, 8, 1);
                let lp = wasserstein_distance(&mu, &nu, &norm).unwrap();
                let qc = quantile_cost_1d(&mu, &nu, p).powf(1.0 / p);
                assert!(
                    (lp - qc).abs() < 1e-10 * (1.0 + qc),
                    "p={p}: lp {lp} vs quantile {qc}"
                );
            }
        }
    }

    #[test]
    fn optimality_certificate_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let m = rng.gen_range(2..7);
            let n = rng.gen_range(2..7);
            let cost: Vec<f64> = (0..m * n).map(|_| rng.gen_range(0.0..5.0)).collect();
            let mut supply: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
            let mut demand: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
            let ts: f64 = supply.iter().sum();
            let td: f64 = demand.iter().sum();
            supply.iter_mut().for_each(|s| *s /= ts);
            demand.iter_mut().for_each(|d| *d /= td);
            let plan = transport_lp(&cost, &supply, &demand).unwrap();
            // Dual feasibility on every arc certifies optimality.
            for i in 0..m {
                for j in 0..n {
                    assert!(
                        plan.potentials_u[i] + plan.potentials_v[j] <= cost[i * n + j] + 1e-9,
                        "dual infeasible at ({i},{j})"
                    );
                }
            }
            // Strong duality: primal cost equals the dual value.
            let dual: f64 = supply
                .iter()
                .zip(&plan.potentials_u)
                .map(|(s, u)| s * u)
                .sum::<f64>()
                + demand
                    .iter()
                    .zip(&plan.potentials_v)
                    .map(|(d, v)| d * v)
                    .sum::<f64>();
            assert!((plan.cost - dual).abs() < 1e-9 * (1.0 + plan.cost));
            // Primal feasibility.
            let mut row_sums = vec![0.0; m];
            let mut col_sums = vec![0.0; n];
            for &(i, j, f) in &plan.flows {
                row_sums[i] += f;
                col_sums[j] += f;
            }
            for i in 0..m {
                assert!((row_sums[i] - supply[i]).abs() < 1e-10);
            }
            for j in 0..n {
                assert!((col_sums[j] - demand[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn seminorm_groups_forbid_cross_slice_transport() {
        // LASSO-type seminorm on (x, y): transport may move x but not y.
        let norm = NormSpec::with_active(2.0, 2.0, ActiveCoords::Subset(vec![0])).unwrap();
        let mu = DiscreteMeasure::make_empirical(vec![
            DVector::from_vec(vec![0.0, 1.0]),
            DVector::from_vec(vec![1.0, 2.0]),
        ])
        .unwrap();
        // Same y-slices, shifted x: finite, matched within slices.
        let nu = DiscreteMeasure::make_empirical(vec![
            DVector::from_vec(vec![0.5, 1.0]),
            DVector::from_vec(vec![1.5, 2.0]),
        ])
        .unwrap();
        let d = wasserstein_distance(&mu, &nu, &norm).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
        // Mismatched y-slices: infeasible.
        let nu_bad = DiscreteMeasure::make_empirical(vec![
            DVector::from_vec(vec![0.5, 1.0]),
            DVector::from_vec(vec![1.5, 3.0]),
        ])
        .unwrap();
        assert!(wasserstein_distance(&mu, &nu_bad, &norm)
            .unwrap()
            .is_infinite());
    }

    #[test]
    fn degenerate_ties_do_not_stall_the_simplex() {
        // Equal supplies/demands create degenerate pivots.
        let cost = vec![1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0];
        let w = vec![1.0 / 3.0; 3];
        let plan = transport_lp(&cost, &w, &w).unwrap();
        assert!((plan.cost - 1.0).abs() < 1e-12);
    }
}
