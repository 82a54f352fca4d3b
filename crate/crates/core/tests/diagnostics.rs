mod common;

use clusterbw::data::Dataset;
use clusterbw::diagnostics::*;
use clusterbw::estimators::*;
use clusterbw::features::FeatureSet;
use common::{random_dataset, unit};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn covariates(ds: &Dataset) -> DMatrix<f64> {
    DMatrix::from_fn(ds.n(), ds.covariate_count(), |i, j| {
        ds.unit(i).covariates[j]
    })
}

/// Textbook SMD over a list of (value, treated, weight) triples.
fn oracle_smd(rows: &[(f64, bool, f64)]) -> Option<f64> {
    let sample = |treated: bool| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.1 == treated)
            .map(|r| r.0)
            .collect()
    };
    let var = |v: &[f64]| -> f64 {
        if v.len() < 2 {
            return 0.0;
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    };
    let (t, c) = (sample(true), sample(false));
    if t.is_empty() || c.is_empty() {
        return None;
    }
    let sd = ((var(&t) + var(&c)) / 2.0).sqrt();
    if sd == 0.0 {
        return None;
    }
    let mt = t.iter().sum::<f64>() / t.len() as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for r in rows.iter().filter(|r| !r.1) {
        num += r.2 * r.0;
        den += r.2;
    }
    Some((mt - num / den) / sd)
}

#[test]
fn smd_matches_direct_summation_with_hierarchical_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let ds = random_dataset(&mut rng, 5, 2..=6, 6..=12, 3);
    let f = FeatureSet::default_for(&ds).unwrap();
    let ws = hierarchical_balancing_weights(&ds, &f, &BalanceOptions::default()).unwrap();
    let w = ws.unit_weights(&ds);
    let x = covariates(&ds);
    let s = smd(&ds, &x, ds.covariate_names(), Some(&w)).unwrap();
    for j in 0..x.ncols() {
        let rows: Vec<_> = (0..ds.n())
            .map(|i| (x[(i, j)], ds.unit(i).treated, w[i]))
            .collect();
        let expected = oracle_smd(&rows).unwrap();
        assert!((s.global[j].unwrap() - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        for (g, c) in ds.clusters().iter().enumerate() {
            let rows: Vec<_> = c
                .members
                .iter()
                .map(|&i| (x[(i, j)], ds.unit(i).treated, w[i]))
                .collect();
            let expected = oracle_smd(&rows).unwrap();
            assert!((s.local[g][j].unwrap() - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }
}

#[test]
fn exact_global_balance_gives_zero_smd_on_phi() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let ds = random_dataset(&mut rng, 4, 3..=5, 10..=14, 2);
    let f = FeatureSet::default_for(&ds).unwrap();
    for method in [
        Method::StandardBw,
        Method::HierarchicalBw,
        Method::MundlakGb,
        Method::MundlakAvto,
    ] {
        let ws = estimate_weights(&ds, &f, method, &EstimatorOptions::default()).unwrap();
        let r = balance_report(&ds, &f, BalanceBlock::Unit, Some(&ws)).unwrap();
        for v in r.smd.global.iter().flatten() {
            assert!(v.abs() <= 1e-6, "{method}: {v}");
        }
    }
}

#[test]
fn degenerate_clusters_are_missing_not_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let base = random_dataset(&mut rng, 2, 2..=3, 4..=5, 2);
    let mut units = base.units().to_vec();
    units.push(unit(900, "lonely", false, 0.0, &[0.0, 1.0]));
    units.push(unit(901, "lonely", false, 0.0, &[1.0, 0.0]));
    let ds = Dataset::new(units, base.covariate_names().to_vec()).unwrap();
    let f = FeatureSet::default_for(&ds).unwrap();
    let r = balance_report(&ds, &f, BalanceBlock::Unit, None).unwrap();
    let g = ds.clusters().iter().position(|c| c.id == "lonely").unwrap();
    assert!(r.smd.local[g].iter().all(Option::is_none));
    assert_eq!(r.missing_local, f.d());
}

#[test]
fn constant_feature_is_flagged_and_excluded() {
    let units = (0..8)
        .map(|i| unit(i, "a", i < 3, 0.0, &[i as f64, 5.0]))
        .collect();
    let ds = Dataset::new(units, vec!["x".into(), "k".into()]).unwrap();
    let s = smd(&ds, &covariates(&ds), ds.covariate_names(), None).unwrap();
    assert!(s.global[1].is_none());
    assert!(s.warnings.iter().any(|w| w.contains('k')));
    let only_x = s.global[0].unwrap();
    assert!((l2(&s.global).unwrap() - only_x.abs()).abs() < 1e-15);
}

#[test]
fn l2_hand_arithmetic() {
    let v = l2(&[Some(0.3), Some(0.4)]).unwrap();
    assert!((v - 0.125f64.sqrt()).abs() < 1e-15);
    assert!((v - 0.3536).abs() < 5e-5);
    assert!(l2(&[None, None]).is_err());
    assert_eq!(l2(&[Some(0.0), None]).unwrap(), 0.0);
}

#[test]
fn unweighted_global_imbalance_of_one_third_scale() {
    // Each feature: treated {m + a, m − a}, controls {−a, a}; pooled sd a√2.
    let targets = [0.2, 0.4, (3.0 * 0.33f64.powi(2) - 0.2).sqrt()];
    let a = 1.5;
    let mut units = Vec::new();
    for (k, (treated, sign)) in [(true, 1.0), (true, -1.0), (false, -1.0), (false, 1.0)]
        .into_iter()
        .enumerate()
    {
        let x: Vec<f64> = targets
            .iter()
            .map(|t| {
                let m = if treated { t * a * 2f64.sqrt() } else { 0.0 };
                m + sign * a
            })
            .collect();
        units.push(unit(k, "a", treated, 0.0, &x));
    }
    let ds = Dataset::new(units, vec!["x1".into(), "x2".into(), "x3".into()]).unwrap();
    let s = smd(&ds, &covariates(&ds), ds.covariate_names(), None).unwrap();
    for (v, t) in s.global.iter().zip(targets) {
        assert!((v.unwrap() - t).abs() < 1e-12);
    }
    assert!((l2(&s.global).unwrap() - 0.33).abs() < 1e-12);
}

#[test]
fn pbr_reported_reductions() {
    assert!((pbr(0.26, 0.05).unwrap() - 80.769_230_769).abs() < 1e-6);
    assert!((pbr(0.21, 0.02).unwrap() - 90.476_190_476).abs() < 1e-6);
    assert_eq!(pbr(0.3, 0.3), Some(0.0));
    assert_eq!(pbr(0.0, 0.1), None);
}

#[test]
fn ess_examples() {
    assert!((ess(&[1.0; 10]).unwrap() - 10.0).abs() < 1e-12);
    assert!((ess(&[1.0, 1.0, 1.0, 3.0]).unwrap() - 3.0).abs() < 1e-12);
    assert!((ess(&[0.0, 0.0, 2.5, 0.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!(ess(&[0.0, 0.0]).is_err());
    assert!(ess(&[1.0, -1.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ess_bounded_by_positive_count(w in prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..10.0], 1..30)) {
        let positive = w.iter().filter(|&&v| v > 0.0).count();
        prop_assume!(positive > 0);
        let e = ess(&w).unwrap();
        prop_assert!(e <= positive as f64 * (1.0 + 1e-12));
        let first = w.iter().copied().find(|&v| v > 0.0).unwrap();
        let equal = w.iter().all(|&v| v == 0.0 || v == first);
        let at_bound = (e - positive as f64).abs() <= 1e-9 * positive as f64;
        if equal {
            prop_assert!(at_bound);
        }
    }

    #[test]
    fn smd_affine_invariance(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -50.0f64..50.0, flip in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = random_dataset(&mut rng, 3, 2..=4, 3..=6, 2);
        let w: Vec<f64> = (0..ds.n()).map(|i| if ds.unit(i).treated { 1.0 } else { rng.random_range(0.1..2.0) }).collect();
        let x = covariates(&ds);
        let a = if flip { -scale } else { scale };
        let y = x.map(|v| a * v + shift);
        let names = ds.covariate_names();
        for weights in [None, Some(w.as_slice())] {
            let s0 = smd(&ds, &x, names, weights).unwrap();
            let s1 = smd(&ds, &y, names, weights).unwrap();
            let sign = a.signum();
            for (p, q) in s0.global.iter().chain(s0.local.iter().flatten()).zip(s1.global.iter().chain(s1.local.iter().flatten())) {
                match (p, q) {
                    (Some(p), Some(q)) => prop_assert!((sign * p - q).abs() <= 1e-9 * p.abs().max(1.0)),
                    (None, None) => {}
                    _ => prop_assert!(false, "missingness changed"),
                }
            }
        }
    }

    #[test]
    fn report_l2_recomputes_from_arrays(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = random_dataset(&mut rng, 3, 2..=4, 6..=9, 2);
        let f = FeatureSet::default_for(&ds).unwrap();
        let ws = estimate_weights(&ds, &f, Method::MundlakGb, &EstimatorOptions::default());
        prop_assume!(ws.is_ok());
        let r = balance_report(&ds, &f, BalanceBlock::Unit, ws.as_ref().ok()).unwrap();
        let g: Vec<f64> = r.smd.global.iter().flatten().copied().collect();
        let l: Vec<f64> = r.smd.local.iter().flatten().flatten().copied().collect();
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        prop_assert!((r.l2_global.unwrap() - rms(&g)).abs() <= 1e-12);
        prop_assert!((r.l2_local.unwrap() - rms(&l)).abs() <= 1e-12);
    }
}
