//! Seminorms of the form "l^s on a subset of coordinates", their dual norms
//! and the h-map (the unit-dual-norm direction attaining the seminorm).
//!
//! For `z` restricted to the active coordinates the seminorm is the plain
//! `l^s` norm; off the active subspace it vanishes. Its dual is the `l^r`
//! norm (`1/r + 1/s = 1`) on the active subspace and `+inf` off it. The h-map
//! satisfies `<x, h(x)> = ||x||` and `||h(x)||_* = 1` for `||x|| != 0`, with
//! the convention `h(x) = 0` when `||x|| = 0`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NormError {
    #[error("seminorm exponent s must satisfy s >= 1, got {0}")]
    BadExponent(f64),
    #[error("Wasserstein order p must satisfy p >= 1, got {0}")]
    BadOrder(f64),
    #[error("active coordinate set must be nonempty and strictly increasing, got {0:?}")]
    BadActiveSet(Vec<usize>),
    #[error("active coordinate {idx} out of range for dimension {dim}")]
    ActiveOutOfRange { idx: usize, dim: usize },
}

/// Which coordinates the seminorm sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActiveCoords {
    /// Proper norm: every coordinate is active.
    All,
    /// Seminorm vanishing off the listed (0-based, strictly increasing) coordinates.
    Subset(Vec<usize>),
}

/// Seminorm `||z|| = l^s(z restricted to active coords)` paired with a
/// Wasserstein transport order `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    s: f64,
    active: ActiveCoords,
    p: f64,
}

impl NormSpec {
    /// Full-coordinate `l^s` norm with transport order `p`.
    pub fn new(s: f64, p: f64) -> Result<Self, NormError> {
        Self::with_active(s, p, ActiveCoords::All)
    }

    /// Euclidean norm, the default choice in most applications.
    pub fn euclidean(p: f64) -> Result<Self, NormError> {
        Self::new(2.0, p)
    }

    pub fn with_active(s: f64, p: f64, active: ActiveCoords) -> Result<Self, NormError> {
        if !(s >= 1.0) || !s.is_finite() {
            return Err(NormError::BadExponent(s));
        }
        if !(p >= 1.0) || !p.is_finite() {
            return Err(NormError::BadOrder(p));
        }
        if let ActiveCoords::Subset(idx) = &active {
            if idx.is_empty() || idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(NormError::BadActiveSet(idx.clone()));
            }
        }
        Ok(Self { s, active, p })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Conjugate exponent `q = p/(p-1)`; `+inf` when `p = 1`.
    pub fn q(&self) -> f64 {
        if self.p > 1.0 {
            self.p / (self.p - 1.0)
        } else {
            f64::INFINITY
        }
    }

    /// Dual exponent of the seminorm, `r = s/(s-1)`; `+inf` when `s = 1`.
    pub fn r(&self) -> f64 {
        if self.s > 1.0 {
            self.s / (self.s - 1.0)
        } else {
            f64::INFINITY
        }
    }

    pub fn active(&self) -> &ActiveCoords {
        &self.active
    }

    /// The active coordinate indices for vectors of dimension `dim`.
    pub fn active_indices(&self, dim: usize) -> Vec<usize> {
        match &self.active {
            ActiveCoords::All => (0..dim).collect(),
            ActiveCoords::Subset(idx) => idx.clone(),
        }
    }

    pub fn check_dim(&self, dim: usize) -> Result<(), NormError> {
        if let ActiveCoords::Subset(idx) = &self.active {
            if let Some(&bad) = idx.iter().find(|&&i| i >= dim) {
                return Err(NormError::ActiveOutOfRange { idx: bad, dim });
            }
        }
        Ok(())
    }

    fn is_active(&self, i: usize) -> bool {
        match &self.active {
            ActiveCoords::All => true,
            ActiveCoords::Subset(idx) => idx.binary_search(&i).is_ok(),
        }
    }

    /// The seminorm `||z||`.
    pub fn seminorm(&self, z: &DVector<f64>) -> f64 {
        ls_norm(
            self.active_indices(z.len()).iter().map(|&i| z[i]),
            self.s,
        )
    }

    /// The dual norm `||y||_* = sup { <x,y> : ||x|| <= 1 }`.
    ///
    /// Equals the `l^r` norm of the active part when every inactive
    /// coordinate is zero, and `+inf` otherwise.
    pub fn dual_norm(&self, y: &DVector<f64>) -> f64 {
        for i in 0..y.len() {
            if !self.is_active(i) && y[i] != 0.0 {
                return f64::INFINITY;
            }
        }
        ls_norm(
            self.active_indices(y.len()).iter().map(|&i| y[i]),
            self.r(),
        )
    }

    /// The h-map: `h(x)` with `||h(x)||_* = 1` and `<x, h(x)> = ||x||`, zero
    /// when `||x|| = 0`.
    ///
    /// Componentwise on active coordinates: `h_i = sign(x_i) |x_i|^{s-1} ||x||^{1-s}`,
    /// which for `s = 1` degenerates to `h_i = sign(x_i)`.
    pub fn h_map(&self, x: &DVector<f64>) -> DVector<f64> {
        self.h_map_flagged(x).0
    }

    /// As [`h_map`](Self::h_map), additionally flagging the `s = 1` corner
    /// case: a zero active component at a point with nonzero seminorm, where
    /// `sign(0) = 0` is a subgradient choice rather than the unique h value.
    pub fn h_map_flagged(&self, x: &DVector<f64>) -> (DVector<f64>, bool) {
        let d = x.len();
        let mut h = DVector::zeros(d);
        let norm = self.seminorm(x);
        if norm == 0.0 {
            return (h, false);
        }
        let mut warned = false;
        if self.s == 1.0 {
            for i in self.active_indices(d) {
                if x[i] == 0.0 {
                    warned = true;
                }
                h[i] = sign(x[i]);
            }
        } else {
            let scale = norm.powf(1.0 - self.s);
            for i in self.active_indices(d) {
                h[i] = sign(x[i]) * x[i].abs().powf(self.s - 1.0) * scale;
            }
        }
        (h, warned)
    }
}

fn sign(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `l^s` norm of an iterator of components; `s = +inf` gives the max norm.
pub(crate) fn ls_norm<I: Iterator<Item = f64>>(components: I, s: f64) -> f64 {
    if s.is_infinite() {
        return components.fold(0.0, |acc, c| acc.max(c.abs()));
    }
    if s == 1.0 {
        return components.map(|c| c.abs()).sum();
    }
    if (s - 2.0).abs() < 1e-15 {
        return components.map(|c| c * c).sum::<f64>().sqrt();
    }
    // Scale for overflow safety at large exponents.
    let comps: Vec<f64> = components.collect();
    let m = comps.iter().fold(0.0_f64, |acc, c| acc.max(c.abs()));
    if m == 0.0 {
        return 0.0;
    }
    m * comps
        .iter()
        .map(|c| (c.abs() / m).powf(s))
        .sum::<f64>()
        .powf(1.0 / s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn conjugate_exponents() {
        let n = NormSpec::new(2.0, 2.0).unwrap();
        assert!((1.0 / n.p() + 1.0 / n.q() - 1.0).abs() < 1e-14);
        let n = NormSpec::new(1.5, 3.0).unwrap();
        assert!((1.0 / n.p() + 1.0 / n.q() - 1.0).abs() < 1e-14);
        assert!((n.r() - 3.0).abs() < 1e-14);
        assert!(NormSpec::new(2.0, 1.0).unwrap().q().is_infinite());
        assert!(NormSpec::new(0.5, 2.0).is_err());
        assert!(NormSpec::new(2.0, 0.9).is_err());
    }

    #[test]
    fn euclidean_dual_is_self() {
        let n = NormSpec::euclidean(2.0).unwrap();
        assert!((n.dual_norm(&vec2(3.0, 4.0)) - 5.0).abs() < 1e-14);
    }

    #[test]
    fn subset_dual_is_infinite_off_subspace() {
        let n =
            NormSpec::with_active(2.0, 2.0, ActiveCoords::Subset(vec![0])).unwrap();
        assert!((n.dual_norm(&vec2(3.0, 0.0)) - 3.0).abs() < 1e-14);
        assert!(n.dual_norm(&vec2(3.0, 1.0)).is_infinite());
    }

    // Independent oracle for the dual norm: maximize <x,y> over a dense set
    // of directions scaled onto the unit ||.||-sphere.
    fn dual_norm_by_search(n: &NormSpec, y: &DVector<f64>, rng: &mut ChaCha8Rng) -> f64 {
        let mut best = 0.0_f64;
        for _ in 0..200_000 {
            let mut x = DVector::from_fn(y.len(), |_, _| rng.gen_range(-1.0..1.0));
            for i in 0..x.len() {
                if !n.active_indices(y.len()).contains(&i) {
                    x[i] = 0.0;
                }
            }
            let norm = n.seminorm(&x);
            if norm == 0.0 {
                continue;
            }
            x /= norm;
            best = best.max(x.dot(y));
        }
        best
    }

    #[test]
    fn dual_norm_s15_matches_search_and_closed_form() {
        let n = NormSpec::new(1.5, 2.0).unwrap();
        let y = vec2(1.0, 1.0);
        // r = 3, |(1,1)|_3 = 2^(1/3).
        let expect = 2.0_f64.powf(1.0 / 3.0);
        assert!((n.dual_norm(&y) - expect).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let searched = dual_norm_by_search(&n, &y, &mut rng);
        assert!(
            (searched - expect).abs() < 2e-3,
            "search {searched} vs closed form {expect}"
        );
    }

    #[test]
    fn h_map_euclidean_and_sign_cases() {
        let n = NormSpec::euclidean(2.0).unwrap();
        let h = n.h_map(&vec2(3.0, 4.0));
        assert!((h[0] - 0.6).abs() < 1e-14 && (h[1] - 0.8).abs() < 1e-14);

        let n1 = NormSpec::new(1.0, 2.0).unwrap();
        let h = n1.h_map(&vec2(2.0, -3.0));
        assert_eq!((h[0], h[1]), (1.0, -1.0));

        let (h, warned) = n1.h_map_flagged(&vec2(0.0, -3.0));
        assert_eq!((h[0], h[1]), (0.0, -1.0));
        assert!(warned);

        let h = n.h_map(&vec2(0.0, 0.0));
        assert_eq!((h[0], h[1]), (0.0, 0.0));
    }

    #[test]
    fn h_map_identities_hold_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for s in [1.2, 1.5, 2.0, 3.0] {
            let n = NormSpec::new(s, 2.0).unwrap();
            for _ in 0..250 {
                let x = DVector::from_fn(4, |_, _| rng.gen_range(-5.0..5.0_f64));
                if n.seminorm(&x) < 1e-9 {
                    continue;
                }
                let h = n.h_map(&x);
                assert!((x.dot(&h) - n.seminorm(&x)).abs() < 1e-10);
                assert!((n.dual_norm(&h) - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hoelder_inequality_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = NormSpec::new(1.7, 2.0).unwrap();
        for _ in 0..1000 {
            let x = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0_f64));
            let y = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0_f64));
            let sn = n.seminorm(&x);
            if sn < 1e-12 {
                continue;
            }
            assert!(n.dual_norm(&y) >= x.dot(&y) / sn - 1e-10);
        }
    }
}
