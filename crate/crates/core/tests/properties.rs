//! Seeded randomized property suites: duality identities of the norm
//! machinery, metric properties of the transport distance, the exact radius
//! of the first-order pushforward, and the primal/dual bracket of the oracle.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use wdro_core::measures::{
    wasserstein_distance, ActiveCoords, DiscreteMeasure, NormSpec, SupportSpec,
};
use wdro_core::oracle::{eval_dual, eval_primal_lowerbound, OracleConfig};
use wdro_core::problem::{builtin_loss, LossModel};
use wdro_core::sensitivity::{upsilon, SensitivityReport};
use wdro_core::OptimizerCertificate;

fn rand_vec(rng: &mut ChaCha8Rng, dim: usize, span: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.gen_range(-span..span))
}

fn rand_measure(rng: &mut ChaCha8Rng, max_atoms: usize, dim: usize) -> DiscreteMeasure {
    let n = rng.gen_range(1..=max_atoms);
    let atoms = (0..n).map(|_| rand_vec(rng, dim, 2.5)).collect();
    let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    DiscreteMeasure::new(atoms, w).unwrap()
}

#[test]
fn h_map_identities_on_1000_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024_0001);
    let norms = [
        NormSpec::new(1.3, 2.0).unwrap(),
        NormSpec::new(2.0, 2.0).unwrap(),
        NormSpec::new(3.5, 1.5).unwrap(),
        NormSpec::with_active(2.0, 2.0, ActiveCoords::Subset(vec![0, 2, 3])).unwrap(),
    ];
    let mut checked = 0;
    while checked < 1000 {
        let norm = &norms[checked % norms.len()];
        let x = rand_vec(&mut rng, 5, 4.0);
        if norm.seminorm(&x) < 1e-8 {
            continue;
        }
        let h = norm.h_map(&x);
        assert!(
            (x.dot(&h) - norm.seminorm(&x)).abs() < 1e-10,
            "pairing identity failed at {x:?}"
        );
        assert!(
            (norm.dual_norm(&h) - 1.0).abs() < 1e-10,
            "unit dual norm failed at {x:?}"
        );
        checked += 1;
    }
}

#[test]
fn hoelder_inequality_on_1000_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024_0002);
    let norm = NormSpec::new(1.6, 2.0).unwrap();
    let mut checked = 0;
    while checked < 1000 {
        let x = rand_vec(&mut rng, 4, 3.0);
        let y = rand_vec(&mut rng, 4, 3.0);
        let sn = norm.seminorm(&x);
        if sn < 1e-10 {
            continue;
        }
        assert!(norm.dual_norm(&y) >= x.dot(&y) / sn - 1e-10);
        checked += 1;
    }
}

#[test]
fn wasserstein_symmetry_and_triangle_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024_0003);
    for p in [1.5, 2.0] {
        let norm = NormSpec::euclidean(p).unwrap();
        for _ in 0..170 {
            let a = rand_measure(&mut rng, 10, 2);
            let b = rand_measure(&mut rng, 10, 2);
            let c = rand_measure(&mut rng, 10, 2);
            let ab = wasserstein_distance(&a, &b, &norm).unwrap();
            let ba = wasserstein_distance(&b, &a, &norm).unwrap();
            assert!((ab - ba).abs() < 1e-9, "symmetry: {ab} vs {ba}");
            let bc = wasserstein_distance(&b, &c, &norm).unwrap();
            let ac = wasserstein_distance(&a, &c, &norm).unwrap();
            assert!(
                ac <= ab + bc + 1e-9,
                "triangle: {ac} > {ab} + {bc} (p = {p})"
            );
        }
    }
}

/// The proof's displacement construction: a pushforward `x -> x + delta T(x)`
/// with unit dual-norm p-mass moves the measure exactly `delta` when `delta`
/// is small against the atom separation (the matched coupling is optimal).
#[test]
fn pushforward_radius_is_exact_for_1000_unit_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024_0004);
    let norm = NormSpec::euclidean(2.0).unwrap();
    let mut checked = 0;
    while checked < 1000 {
        let mu = rand_measure(&mut rng, 8, 2);
        if mu.len() < 2 {
            continue;
        }
        // Minimum atom separation bounds the safe radius.
        let mut min_sep = f64::INFINITY;
        for i in 0..mu.len() {
            for j in (i + 1)..mu.len() {
                min_sep = min_sep.min((mu.atoms()[i].clone() - &mu.atoms()[j]).norm());
            }
        }
        if min_sep < 1e-3 {
            continue;
        }
        // Random field, normalized so sum w_i |T(x_i)|^p = 1.
        let mut field: Vec<DVector<f64>> = (0..mu.len())
            .map(|_| rand_vec(&mut rng, 2, 1.0))
            .collect();
        let p = norm.p();
        let mass: f64 = field
            .iter()
            .zip(mu.weights())
            .map(|(t, w)| w * t.norm().powf(p))
            .sum();
        if mass < 1e-12 {
            continue;
        }
        let scale = mass.powf(-1.0 / p);
        field.iter_mut().for_each(|t| *t *= scale);
        let delta = 0.05 * min_sep;
        let pushed = DiscreteMeasure::new(
            mu.atoms()
                .iter()
                .zip(&field)
                .map(|(x, t)| x + t * delta)
                .collect(),
            mu.weights().to_vec(),
        )
        .unwrap();
        let w = wasserstein_distance(&mu, &pushed, &norm).unwrap();
        assert!(
            (w - delta).abs() < 1e-9,
            "pushforward radius {w} vs delta {delta}"
        );
        checked += 1;
    }
}

fn catalog_cases() -> Vec<(LossModel, DiscreteMeasure, NormSpec, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024_0005);
    let gaussian = |rng: &mut ChaCha8Rng, n: usize, dim: usize, mean: f64, sd: f64| {
        DiscreteMeasure::make_empirical(
            (0..n)
                .map(|_| {
                    DVector::from_fn(dim, |_, _| {
                        mean + sd * rng.sample::<f64, _>(rand_distr::StandardNormal)
                    })
                })
                .collect(),
        )
        .unwrap()
    };
    let reg_measure = {
        let coefs = [1.1_f64, -0.4];
        DiscreteMeasure::make_empirical(
            (0..25)
                .map(|_| {
                    let x0: f64 = rng.sample(rand_distr::StandardNormal);
                    let x1: f64 = rng.sample(rand_distr::StandardNormal);
                    let noise: f64 = rng.sample(rand_distr::StandardNormal);
                    let y = coefs[0] * x0 + coefs[1] * x1 + 0.5 * noise;
                    DVector::from_vec(vec![x0, x1, y])
                })
                .collect(),
        )
        .unwrap()
    };
    vec![
        (
            builtin_loss("linear", &serde_json::json!({"c": [1.0, -0.5]})).unwrap(),
            gaussian(&mut rng, 20, 2, 0.0, 1.0),
            NormSpec::euclidean(2.0).unwrap(),
            DVector::zeros(1),
        ),
        (
            builtin_loss("quadratic-tracking", &serde_json::json!({})).unwrap(),
            gaussian(&mut rng, 20, 1, 0.4, 0.8),
            NormSpec::euclidean(2.0).unwrap(),
            DVector::from_vec(vec![0.3]),
        ),
        (
            builtin_loss(
                "oce",
                &serde_json::json!({"l": "quad", "g": {"kind": "identity"}}),
            )
            .unwrap(),
            gaussian(&mut rng, 25, 1, 0.0, 0.5),
            NormSpec::euclidean(2.0).unwrap(),
            DVector::from_vec(vec![0.1]),
        ),
        (
            builtin_loss(
                "hedging",
                &serde_json::json!({"l": "quad", "g": {"kind": "linear", "w": [1.0, 0.5]}, "x0": [0.8, 0.9]}),
            )
            .unwrap(),
            gaussian(&mut rng, 20, 2, 1.0, 0.5),
            NormSpec::euclidean(2.0).unwrap(),
            DVector::zeros(2),
        ),
        (
            builtin_loss("sqrt-regression", &serde_json::json!({"k": 2})).unwrap(),
            reg_measure,
            NormSpec::with_active(2.0, 2.0, ActiveCoords::Subset(vec![0, 1])).unwrap(),
            DVector::from_vec(vec![0.9, -0.2]),
        ),
        (
            builtin_loss(
                "call-smooth",
                &serde_json::json!({"s0": 1.0, "strike": 1.1, "beta": 8.0}),
            )
            .unwrap(),
            wdro_core::apps::lognormal_quantile_measure(0.2, 1.0, 25).unwrap(),
            NormSpec::euclidean(2.0).unwrap(),
            DVector::zeros(1),
        ),
    ]
}

#[test]
fn weak_duality_bracket_holds_across_catalog_and_radii() {
    let cfg = OracleConfig::default();
    for (loss, mu, norm, a) in catalog_cases() {
        for delta in [0.001, 0.01, 0.05, 0.2, 0.5] {
            let dual = eval_dual(&loss, &mu, &norm, delta, &a, &SupportSpec::All, &cfg)
                .unwrap_or_else(|e| panic!("{}: {e}", loss.name()));
            let lower =
                eval_primal_lowerbound(&loss, &mu, &norm, delta, &a, &SupportSpec::All).unwrap();
            assert!(
                lower <= dual.value + 1e-7 * (1.0 + dual.value.abs()),
                "{} at delta {delta}: primal {lower} > dual {}",
                loss.name(),
                dual.value
            );
            assert!(
                dual.value >= mu.integrate(|x| loss.value(x, &a)) - 1e-9,
                "{}: enlarging the ball cannot lose value",
                loss.name()
            );
        }
    }
}

#[test]
fn displaced_measures_stay_inside_the_ball() {
    let cfg = OracleConfig::default();
    for (loss, mu, norm, a) in catalog_cases() {
        for delta in [0.02, 0.1, 0.4] {
            let res = eval_dual(&loss, &mu, &norm, delta, &a, &SupportSpec::All, &cfg)
                .unwrap_or_else(|e| panic!("{}: {e}", loss.name()));
            let nu = res.displaced_measure(&mu);
            let w = wasserstein_distance(&mu, &nu, &norm).unwrap();
            assert!(
                w <= delta * (1.0 + 1e-6),
                "{} at delta {delta}: displaced measure at distance {w}",
                loss.name()
            );
        }
    }
}

#[test]
fn dual_value_is_monotone_in_the_radius() {
    let cfg = OracleConfig::default();
    for (loss, mu, norm, a) in catalog_cases() {
        let mut prev = f64::NEG_INFINITY;
        for delta in [0.0, 0.01, 0.03, 0.08, 0.2, 0.35, 0.5] {
            let v = eval_dual(&loss, &mu, &norm, delta, &a, &SupportSpec::All, &cfg)
                .unwrap_or_else(|e| panic!("{}: {e}", loss.name()))
                .value;
            assert!(
                v >= prev - 1e-9 * (1.0 + v.abs()),
                "{}: value dropped from {prev} to {v} at delta {delta}",
                loss.name()
            );
            prev = v;
        }
    }
}

#[test]
fn upsilon_homogeneity_on_1000_random_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024_0006);
    let loss = builtin_loss("linear", &serde_json::json!({"c": [0.8, 0.6]})).unwrap();
    let mu = rand_measure(&mut rng, 15, 2);
    let norm = NormSpec::euclidean(2.0).unwrap();
    let cert = OptimizerCertificate::supplied(DVector::zeros(1));
    let base = upsilon(&loss, &mu, &norm, std::slice::from_ref(&cert))
        .unwrap()
        .upsilon;
    for _ in 0..1000 {
        let c: f64 = rng.gen_range(-3.0..3.0);
        let scaled = scale_loss(&loss, c);
        let u = upsilon(&scaled, &mu, &norm, std::slice::from_ref(&cert))
            .unwrap()
            .upsilon;
        assert!(
            (u - c.abs() * base).abs() < 1e-10 * (1.0 + base),
            "c = {c}: {u} vs {}",
            c.abs() * base
        );
    }
}

fn scale_loss(loss: &LossModel, c: f64) -> LossModel {
    let inner = loss.clone();
    let g = loss.clone();
    LossModel::new(
        "scaled",
        loss.state_dim(),
        loss.action_dim(),
        loss.growth_exponent(),
        std::sync::Arc::new(move |x: &DVector<f64>, a: &DVector<f64>| c * inner.value(x, a)),
    )
    .with_grad_x(std::sync::Arc::new(move |x, a| g.grad_x(x, a) * c))
}

#[allow(dead_code)]
fn never_used(_: SensitivityReport) {}

// ---------------------------------------------------------------------------
// proptest invariants (scoped module: the proptest and rand preludes clash)
// ---------------------------------------------------------------------------

mod prop_invariants {
    use nalgebra::DVector;
    use proptest::prelude::*;
    use wdro_core::measures::{wasserstein_distance, DiscreteMeasure, NormSpec};

    fn measure_strategy() -> impl Strategy<Value = DiscreteMeasure> {
        (1usize..6).prop_flat_map(|n| {
            (
                proptest::collection::vec(proptest::collection::vec(-5.0..5.0f64, 2), n..=n),
                proptest::collection::vec(0.01..1.0f64, n..=n),
            )
                .prop_map(|(atoms, mut weights)| {
                    let total: f64 = weights.iter().sum();
                    weights.iter_mut().for_each(|w| *w /= total);
                    DiscreteMeasure::new(
                        atoms.into_iter().map(DVector::from_vec).collect(),
                        weights,
                    )
                    .unwrap()
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn measure_serialization_round_trips(mu in measure_strategy()) {
            let mut csv = Vec::new();
            mu.write_csv(&mut csv).unwrap();
            let back = DiscreteMeasure::read_csv(csv.as_slice()).unwrap();
            prop_assert_eq!(&mu, &back);
            let mut json = Vec::new();
            mu.write_json(&mut json).unwrap();
            let back = DiscreteMeasure::read_json(json.as_slice()).unwrap();
            prop_assert_eq!(&mu, &back);
        }

        #[test]
        fn wasserstein_is_a_metric_on_random_pairs(
            a in measure_strategy(),
            b in measure_strategy(),
        ) {
            let norm = NormSpec::euclidean(2.0).unwrap();
            let ab = wasserstein_distance(&a, &b, &norm).unwrap();
            let ba = wasserstein_distance(&b, &a, &norm).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-9);
            let aa = wasserstein_distance(&a, &a, &norm).unwrap();
            prop_assert!(aa.abs() < 1e-10);
        }
    }
}
