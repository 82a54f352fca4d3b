use super::*;
use crate::data::{Dataset, Unit};
use crate::features::{FeatureSpec, SufficientSpec};

fn unit(id: usize, cluster: &str, treated: bool, y: f64, x: &[f64]) -> Unit {
    Unit {
        unit_id: format!("u{id}"),
        cluster_id: cluster.to_string(),
        treated,
        outcome: y,
        covariates: x.to_vec(),
    }
}

fn raw_features(ds: &Dataset) -> FeatureSet {
    FeatureSet::build(
        ds,
        &FeatureSpec::raw(ds.covariate_count()),
        &SufficientSpec::default_for(ds),
    )
    .unwrap()
}

fn fixed(lambda: f64) -> BalanceOptions {
    BalanceOptions {
        lambda: Lambda::Fixed(lambda),
        ..BalanceOptions::default()
    }
}

#[test]
fn symmetric_two_control_instance() {
    let ds = Dataset::new(
        vec![
            unit(0, "a", true, 1.0, &[1.0]),
            unit(1, "a", false, 0.0, &[0.0]),
            unit(2, "a", false, 0.0, &[2.0]),
        ],
        vec!["x".into()],
    )
    .unwrap();
    let ws = standard_balancing_weights(&ds, &raw_features(&ds), &fixed(1.0)).unwrap();
    assert!((ws.gamma[0] - 0.5).abs() < 1e-9 && (ws.gamma[1] - 0.5).abs() < 1e-9);
    assert!((ws.implied_propensity[0] - 1.0 / 3.0).abs() < 1e-9);
}

#[test]
fn hierarchical_rejects_degenerate_clusters() {
    let ds = Dataset::new(
        vec![
            unit(0, "a", true, 1.0, &[1.0]),
            unit(1, "a", false, 0.0, &[0.0]),
            unit(2, "b", false, 0.0, &[2.0]),
        ],
        vec!["x".into()],
    )
    .unwrap();
    let err = hierarchical_balancing_weights(&ds, &raw_features(&ds), &fixed(1.0)).unwrap_err();
    assert!(matches!(err, Error::DegenerateClusters { count: 1 }));
    let err = mundlak_weights(
        &ds,
        &raw_features(&ds),
        MundlakVariant::AverageToOne,
        &fixed(1.0),
    )
    .unwrap_err();
    assert!(matches!(err, Error::DegenerateClusters { .. }));
}

#[test]
fn infeasible_balance_reports_violations_or_falls_back() {
    // Treated x = 5 lies outside the control range.
    let ds = Dataset::new(
        vec![
            unit(0, "a", true, 1.0, &[5.0]),
            unit(1, "a", false, 0.0, &[0.0]),
            unit(2, "a", false, 0.0, &[1.0]),
        ],
        vec!["x".into()],
    )
    .unwrap();
    let f = raw_features(&ds);
    match standard_balancing_weights(&ds, &f, &fixed(1.0)) {
        Err(Error::Infeasible { violations, .. }) => assert_eq!(violations.len(), 2),
        other => panic!("expected infeasible, got {other:?}"),
    }
    let mut opts = fixed(1.0);
    opts.penalty_fallback = true;
    let ws = standard_balancing_weights(&ds, &f, &opts).unwrap();
    assert!(matches!(
        ws.meta,
        SolverMeta::Qp {
            penalty_fallback: true,
            ..
        }
    ));
    assert!(!ws.warnings.is_empty());
    assert!(ws.gamma.iter().all(|&g| g >= 0.0));
}

#[test]
fn worst_case_bound_is_zero_at_exact_balance() {
    let ds = Dataset::new(
        vec![
            unit(0, "a", true, 1.0, &[1.0]),
            unit(1, "a", false, 0.0, &[0.0]),
            unit(2, "a", false, 0.0, &[2.0]),
        ],
        vec!["x".into()],
    )
    .unwrap();
    let f = raw_features(&ds);
    let ws = hierarchical_balancing_weights(&ds, &f, &fixed(1.0)).unwrap();
    assert!(worst_case_bias_bound(&ds, &f, &ws, &BalanceModelClass::default()) < 1e-9);
    assert!(declared_constraint_residual(&ds, &f, &ws) < 1e-9);
}

#[test]
fn ri_ipw_intercept_only_is_uniform() {
    let units = (0..6).map(|i| unit(i, "a", i < 3, 0.0, &[])).collect();
    let ds = Dataset::new(units, vec![]).unwrap();
    let f = raw_features(&ds);
    let ws = ri_ipw_weights(&ds, &f, &RiIpwOptions::default()).unwrap();
    for g in &ws.gamma {
        assert!((g - 1.0).abs() < 1e-8);
    }
}

#[test]
fn method_names_round_trip_through_serde() {
    for m in Method::ALL {
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, format!("\"{}\"", m.name()));
    }
}

#[test]
fn lambda_reads_auto_or_number() {
    assert_eq!(
        serde_json::from_str::<Lambda>("\"auto\"").unwrap(),
        Lambda::Auto
    );
    assert_eq!(
        serde_json::from_str::<Lambda>("0.25").unwrap(),
        Lambda::Fixed(0.25)
    );
    assert_eq!(
        serde_json::from_str::<Lambda>("2").unwrap(),
        Lambda::Fixed(2.0)
    );
    assert!(serde_json::from_str::<Lambda>("-1").is_err());
    assert!(serde_json::from_str::<Lambda>("\"fixed\"").is_err());
    assert_eq!(serde_json::to_string(&Lambda::Fixed(0.5)).unwrap(), "0.5");
    assert_eq!(serde_json::to_string(&Lambda::Auto).unwrap(), "\"auto\"");
}
