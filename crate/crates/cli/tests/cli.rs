use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clusterbw::data::{write_csv, Dataset, FilterMode, Unit};
use clusterbw::diagnostics::smd;
use clusterbw::estimators::{estimate_weights, EstimatorOptions, Method};
use clusterbw::features::{FeatureSet, FeatureSpec, SufficientSpec};
use clusterbw::inference::{estimate_effect, EffectOptions};
use clusterbw::simulation::{generate, SimConfig};
use nalgebra::DMatrix;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clusterbw"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Rows of a CSV output keyed by header name, skipping the provenance line.
fn read_rows(path: &Path) -> Vec<HashMap<String, String>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            headers
                .iter()
                .zip(rec.unwrap().iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

fn canonical_config(data: &str, extra: &str, covariates: &[String]) -> String {
    let covs: Vec<String> = covariates.iter().map(|c| format!("\"{c}\"")).collect();
    format!(
        r#"{{"input": "{data}", "schema": {{"unit_id": "unit_id", "treatment": "treatment", "outcome": "outcome", "cluster": "cluster_id", "covariates": [{}]}}{extra}}}"#,
        covs.join(", ")
    )
}

const TINY: &str = "id,g,z,y,x\n1,a,1,2.0,0.3\n2,a,0,1.0,0.1\n3,a,0,1.5,0.6\n4,b,1,2.2,0.2\n5,b,0,0.7,0.4\n6,b,0,1.1,0.0\n7,a,0,0.9,0.5\n8,b,0,1.3,0.25\n";
const TINY_SCHEMA: &str = r#""schema": {"unit_id": "id", "treatment": "z", "outcome": "y", "cluster": "g", "covariates": ["x"]}"#;

#[test]
fn single_estimator_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "d.csv", TINY);
    let cfg = write(
        dir.path(),
        "c.json",
        &format!(r#"{{"input": "d.csv", {TINY_SCHEMA}, "estimators": ["standard-bw"]}}"#),
    );
    let out = dir.path().join("out");
    let o = run(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_rows(&out.join("effects.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["method"], "standard-bw");
    assert_eq!(rows[0]["status"], "ok");
    let lo: f64 = rows[0]["ci_low"].parse().unwrap();
    let hi: f64 = rows[0]["ci_high"].parse().unwrap();
    let att: f64 = rows[0]["att"].parse().unwrap();
    assert!(lo <= att && att <= hi);
    // stdout lists written files; stderr carries no numbers from the results.
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.ends_with("effects.csv")));
    assert!(!String::from_utf8_lossy(&o.stderr).contains(&rows[0]["att"]));
}

#[test]
fn unknown_estimator_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "d.csv", TINY);
    let cfg = write(
        dir.path(),
        "c.json",
        &format!(r#"{{"input": "d.csv", {TINY_SCHEMA}, "estimators": ["standard-bw", "oracle"]}}"#),
    );
    let o = run(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("estimators[1]") && err.contains("oracle"),
        "{err}"
    );
}

#[test]
fn bad_input_rows_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "d.csv", &TINY.replace("3,a,0,1.5", "3,a,2,1.5"));
    let cfg = write(
        dir.path(),
        "c.json",
        &format!(r#"{{"input": "d.csv", {TINY_SCHEMA}}}"#),
    );
    let o = run(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 3"));
}

#[test]
fn every_estimator_failing_exits_1() {
    // Treated covariate far outside the control range: exact balance is infeasible.
    let text =
        "id,g,z,y,x\n1,a,1,1,10\n2,a,0,1,0\n3,a,0,2,1\n4,b,1,1,12\n5,b,0,0,0.5\n6,b,0,1,0.2\n";
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "d.csv", text);
    let cfg = write(
        dir.path(),
        "c.json",
        &format!(
            r#"{{"input": "d.csv", {TINY_SCHEMA}, "estimators": ["standard-bw", "hierarchical-bw"], "features": {{"squares": "none"}}}}"#
        ),
    );
    let out = dir.path().join("o");
    let o = run(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let rows = read_rows(&out.join("effects.csv"));
    assert!(rows.iter().all(|r| r["status"] == "failed"));
    let json: Value =
        serde_json::from_str(&fs::read_to_string(out.join("estimates.json")).unwrap()).unwrap();
    assert!(json["results"][0]["error"]
        .as_str()
        .unwrap()
        .contains("infeasible"));
}

fn simulated_csv(dir: &Path) -> Dataset {
    let cfg = SimConfig {
        n_clusters: 12,
        units_per_cluster: 40,
        rho_u: 0.5,
        ..SimConfig::default()
    };
    let (ds, _) = generate(&cfg, 7).unwrap();
    write_csv(&ds, dir.join("sim.csv")).unwrap();
    ds
}

#[test]
fn five_methods_match_library_calls() {
    let dir = tempfile::tempdir().unwrap();
    let ds = simulated_csv(dir.path());
    let cfg = write(
        dir.path(),
        "c.json",
        &canonical_config("sim.csv", r#", "seed": 11"#, ds.covariate_names()),
    );
    let out = dir.path().join("o");
    let o = run(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_rows(&out.join("effects.csv"));
    assert_eq!(rows.len(), 5);
    for (row, method) in rows.iter().zip(Method::ALL) {
        assert_eq!(row["method"], method.name());
        let d = if method.needs_nondegenerate_clusters() {
            clusterbw::data::filter_degenerate_clusters(&ds, FilterMode::DropBoth)
                .unwrap()
                .retained
        } else {
            ds.clone()
        };
        // Squares are chosen on the full dataset, as the CLI does.
        let f_spec = FeatureSpec::default_for(&ds);
        let f = FeatureSet::build(&d, &f_spec, &SufficientSpec::default_for(&d)).unwrap();
        let ws = estimate_weights(&d, &f, method, &EstimatorOptions::default()).unwrap();
        let e = estimate_effect(&d, &f, &ws, &EffectOptions::default()).unwrap();
        assert_eq!(row["att"].parse::<f64>().unwrap(), e.att, "{method}");
        assert_eq!(row["ci_low"].parse::<f64>().unwrap(), e.ci_low, "{method}");
        assert_eq!(
            row["ess"].parse::<f64>().unwrap(),
            e.ess_control,
            "{method}"
        );
    }
    let header = first_line(&out.join("effects.csv"));
    assert!(header.starts_with("# config_sha256=") && header.ends_with("seed=11"));
    let json: Value =
        serde_json::from_str(&fs::read_to_string(out.join("estimates.json")).unwrap()).unwrap();
    assert_eq!(json["seed"], 11);
    assert_eq!(json["config_sha256"].as_str().unwrap().len(), 64);
    for m in Method::ALL {
        assert!(first_line(&out.join(format!("weights_{}.csv", m.name())))
            .starts_with("# config_sha256="));
    }
}

#[test]
fn weighted_smd_recomputes_from_exported_weights() {
    let dir = tempfile::tempdir().unwrap();
    let ds = simulated_csv(dir.path());
    let cfg = write(
        dir.path(),
        "c.json",
        &canonical_config(
            "sim.csv",
            r#", "estimators": ["mundlak-gb"], "features": {"squares": "none", "standardize": false}"#,
            ds.covariate_names(),
        ),
    );
    let out = dir.path().join("o");
    let o = run(&[
        "balance",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let weights: HashMap<String, f64> = read_rows(&out.join("weights_mundlak-gb.csv"))
        .into_iter()
        .map(|r| (r["unit_id"].clone(), r["gamma"].parse().unwrap()))
        .collect();
    let w: Vec<f64> = ds
        .units()
        .iter()
        .map(|u| if u.treated { 1.0 } else { weights[&u.unit_id] })
        .collect();
    let x = DMatrix::from_fn(ds.n(), ds.covariate_count(), |i, j| {
        ds.unit(i).covariates[j]
    });
    let s = smd(&ds, &x, ds.covariate_names(), Some(&w)).unwrap();
    let rows = read_rows(&out.join("balance.csv"));
    let mut checked = 0;
    for r in rows
        .iter()
        .filter(|r| r["method"] == "mundlak-gb" && r["block"] == "unit" && r["cluster"].is_empty())
    {
        let j = ds
            .covariate_names()
            .iter()
            .position(|n| *n == r["feature"])
            .unwrap();
        assert_eq!(r["smd"].parse::<f64>().unwrap(), s.global[j].unwrap());
        checked += 1;
    }
    assert_eq!(checked, ds.covariate_count());
}

#[test]
fn unweighted_only_balance_has_no_pbr() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "d.csv", TINY);
    let cfg = write(
        dir.path(),
        "c.json",
        &format!(r#"{{"input": "d.csv", {TINY_SCHEMA}, "estimators": []}}"#),
    );
    let out = dir.path().join("o");
    let o = run(&[
        "balance",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_rows(&out.join("balance.csv"));
    assert!(!rows.is_empty() && rows.iter().all(|r| r["method"] == "unweighted"));
    let json: Value =
        serde_json::from_str(&fs::read_to_string(out.join("balance.json")).unwrap()).unwrap();
    for s in json["unweighted"].as_array().unwrap() {
        assert!(s.get("pbr_global").is_none() && s.get("pbr_local").is_none());
        assert!(s.get("l2_global").is_some());
    }
}

#[test]
fn identical_arms_have_zero_smd() {
    let mut units = Vec::new();
    for (g, xs) in [("a", [0.1, 0.7, -0.4]), ("b", [1.2, -0.3, 0.5])] {
        for treated in [true, false] {
            for (k, &x) in xs.iter().enumerate() {
                units.push(Unit {
                    unit_id: format!("{g}{treated}{k}"),
                    cluster_id: g.into(),
                    treated,
                    outcome: x,
                    covariates: vec![x, 2.0 * x * x],
                });
            }
        }
    }
    let ds = Dataset::new(units, vec!["x".into(), "w".into()]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_csv(&ds, dir.path().join("same.csv")).unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        &canonical_config(
            "same.csv",
            r#", "estimators": ["standard-bw"]"#,
            ds.covariate_names(),
        ),
    );
    let out = dir.path().join("o");
    assert!(run(&[
        "balance",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap()
    ])
    .status
    .success());
    for r in read_rows(&out.join("balance.csv"))
        .iter()
        .filter(|r| r["block"] == "unit")
    {
        for key in ["smd_unweighted", "smd"] {
            assert!(r[key].parse::<f64>().unwrap().abs() < 1e-12, "{r:?}");
        }
    }
}

#[test]
fn simulate_is_deterministic_and_seed_overridable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sim.json",
        r#"{"n_clusters": 10, "units_per_cluster": 40, "n_reps": 1, "estimators": ["mundlak-gb"], "seed": 5}"#,
    );
    let files = ["sim_results.csv", "sim_reps.csv", "sim_summary.json"];
    let mut outputs = Vec::new();
    for (k, extra) in [&[][..], &[][..], &["--seed", "6"][..]].iter().enumerate() {
        let out = dir.path().join(format!("o{k}"));
        let mut args = vec![
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(files.map(|f| fs::read(out.join(f)).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_ne!(outputs[0][1], outputs[2][1]);
    let reps = read_rows(&dir.path().join("o0/sim_reps.csv"));
    assert_eq!(reps.len(), 1);
    assert!(first_line(&dir.path().join("o2/sim_results.csv")).ends_with("seed=6"));
    let summary: Value = serde_json::from_slice(&outputs[2][2]).unwrap();
    assert_eq!(summary["seed"], 6);
    assert_eq!(summary["config"]["seed"], 6);
}

#[test]
fn validate_reports_both_config_kinds() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "d.csv", TINY);
    let run_cfg = write(
        dir.path(),
        "c.json",
        &format!(r#"{{"input": "d.csv", {TINY_SCHEMA}}}"#),
    );
    let o = run(&["validate", "--config", run_cfg.to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("kind=run") && text.contains("n=8"));
    let sim_cfg = write(dir.path(), "s.json", r#"{"n_reps": 0}"#);
    let o = run(&["validate", "--config", sim_cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let sim_cfg = write(dir.path(), "s2.json", r#"{"rho_u": 0.25}"#);
    let o = run(&["validate", "--config", sim_cfg.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("kind=simulate"));
}
