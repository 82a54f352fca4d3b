//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clusterbw::data::DroppedCluster;
use clusterbw::diagnostics::{write_balance_csv, BalanceBlock, BalanceReport, BalanceSummary};
use clusterbw::estimators::{Method, SolverMeta};
use clusterbw::fmt::{num, opt};
use clusterbw::inference::EffectEstimate;
use clusterbw::simulation::{
    run_monte_carlo, write_reps_csv, write_tidy_csv, MethodSummary, SimConfig,
};
use serde::Serialize;

use crate::config::{parse_json, RunConfig};
use crate::output::{write_rows, OutDir, Provenance};
use crate::pipeline::{baseline, run_method, Inputs, MethodRun};
use crate::CliError;

pub struct Common {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn read_config(path: &Path) -> Result<(Vec<u8>, String), CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Config("config file is not valid UTF-8".into()))?;
    Ok((bytes, text))
}

fn load_run_config(common: &Common) -> Result<(RunConfig, Provenance), CliError> {
    let (bytes, text) = read_config(&common.config)?;
    let mut cfg: RunConfig = parse_json(&text)?;
    cfg.check()?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let prov = Provenance::new(&bytes, cfg.seed);
    Ok((cfg, prov))
}

fn out_dir(common: &Common, configured: Option<&PathBuf>, fallback: &str) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| {
            configured.map(|p| {
                if p.is_absolute() {
                    p.clone()
                } else {
                    common.config.parent().unwrap_or(Path::new(".")).join(p)
                }
            })
        })
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn progress(msg: &str) {
    eprintln!("clusterbw: {msg}");
}

fn all_failed(runs: &[MethodRun]) -> bool {
    !runs.is_empty() && runs.iter().all(|r| r.outcome.is_err())
}

fn report_failures(runs: &[MethodRun]) {
    for r in runs {
        if let Err(e) = &r.outcome {
            progress(&format!("{} failed: {e}", r.method));
        }
    }
}

fn unit_report(reports: &[BalanceReport]) -> Option<&BalanceReport> {
    reports.iter().find(|r| r.block == BalanceBlock::Unit)
}

#[derive(Serialize)]
struct MethodDetail<'a> {
    method: Method,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
    dropped_clusters: &'a [DroppedCluster],
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sum_gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    solver: Option<&'a SolverMeta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    effect: Option<&'a EffectEstimate>,
    balance: Vec<BalanceSummary>,
    warnings: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    weights_file: Option<String>,
}

fn detail(r: &MethodRun) -> MethodDetail<'_> {
    let name = r.method.name();
    match &r.outcome {
        Ok(f) => MethodDetail {
            method: r.method,
            status: "ok",
            error: None,
            dropped_clusters: &r.dropped,
            lambda: f.weights.lambda,
            sum_gamma: Some(f.weights.sum_gamma),
            solver: Some(&f.weights.meta),
            effect: f.effect.as_ref(),
            balance: f
                .balance
                .iter()
                .map(|b| BalanceSummary::new(name, b))
                .collect(),
            warnings: &f.weights.warnings,
            weights_file: Some(format!("weights_{name}.csv")),
        },
        Err(e) => MethodDetail {
            method: r.method,
            status: "failed",
            error: Some(e),
            dropped_clusters: &r.dropped,
            lambda: None,
            sum_gamma: None,
            solver: None,
            effect: None,
            balance: Vec::new(),
            warnings: &[],
            weights_file: None,
        },
    }
}

#[derive(Serialize)]
struct DatasetInfo {
    input: String,
    n: usize,
    n_treated: usize,
    n_control: usize,
    clusters: usize,
    degenerate_clusters: usize,
}

fn dataset_info(cfg: &RunConfig, common: &Common, inputs: &Inputs) -> DatasetInfo {
    let ds = &inputs.full;
    DatasetInfo {
        input: cfg.input_path(&common.config).display().to_string(),
        n: ds.n(),
        n_treated: ds.n1(),
        n_control: ds.n0(),
        clusters: ds.cluster_count(),
        degenerate_clusters: ds.degenerate_cluster_count(),
    }
}

fn write_weights(out: &mut OutDir, prov: &Provenance, runs: &[MethodRun]) -> Result<(), CliError> {
    for r in runs {
        if let Ok(f) = &r.outcome {
            let rows = f
                .control_ids
                .iter()
                .zip(&f.weights.gamma)
                .zip(&f.weights.implied_propensity)
                .map(|(((u, c), g), e)| vec![u.clone(), c.clone(), num(*g), num(*e)]);
            out.csv(&format!("weights_{}.csv", r.method.name()), prov, |buf| {
                write_rows(
                    buf,
                    &["unit_id", "cluster_id", "gamma", "implied_propensity"],
                    rows,
                )
            })?;
        }
    }
    Ok(())
}

/// `estimate`: effects table, per-method JSON detail and weights.
pub fn estimate(common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let (cfg, prov) = load_run_config(common)?;
    if cfg.estimators.is_empty() {
        return Err(CliError::Config(
            "estimators: at least one estimator is required".into(),
        ));
    }
    let mut inputs = Inputs::load(&cfg, &common.config)?;
    let mut runs = Vec::new();
    for entry in &cfg.estimators {
        progress(&format!("fitting {}", entry.method));
        runs.push(run_method(&cfg, &mut inputs, entry, true));
    }
    report_failures(&runs);

    let mut out = OutDir::create(&out_dir(common, cfg.output_dir.as_ref(), "clusterbw-out"))?;
    let rows = runs.iter().map(|r| match &r.outcome {
        Ok(f) => {
            let e = f.effect.as_ref().expect("effect requested");
            let b = unit_report(&f.balance);
            vec![
                r.method.name().to_string(),
                num(e.att),
                num(e.ci_low),
                num(e.ci_high),
                num(e.ess_control),
                opt(b.and_then(|b| b.l2_global)),
                opt(b.and_then(|b| b.l2_local)),
                opt(b.and_then(|b| b.pbr_local)),
                opt(b.and_then(|b| b.pbr_global)),
                r.dropped.len().to_string(),
                "ok".to_string(),
            ]
        }
        Err(_) => {
            let mut row = vec![r.method.name().to_string()];
            row.extend(std::iter::repeat_n(String::new(), 8));
            row.push(r.dropped.len().to_string());
            row.push("failed".to_string());
            row
        }
    });
    out.csv("effects.csv", &prov, |buf| {
        write_rows(
            buf,
            &[
                "method",
                "att",
                "ci_low",
                "ci_high",
                "ess",
                "l2_global",
                "l2_local",
                "pbr",
                "pbr_global",
                "dropped_clusters",
                "status",
            ],
            rows,
        )
    })?;

    #[derive(Serialize)]
    struct Body<'a> {
        dataset: DatasetInfo,
        alpha: f64,
        bias_correct: bool,
        results: Vec<MethodDetail<'a>>,
    }
    let body = Body {
        dataset: dataset_info(&cfg, common, &inputs),
        alpha: cfg.alpha,
        bias_correct: cfg.bias_correct,
        results: runs.iter().map(detail).collect(),
    };
    out.json("estimates.json", &prov, &body)?;
    write_weights(&mut out, &prov, &runs)?;
    if all_failed(&runs) {
        return Err(CliError::AllFailed(out.written));
    }
    Ok(out.written)
}

/// `balance`: long-format SMD table plus JSON summaries, with an unweighted
/// baseline.
pub fn balance(common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let (cfg, prov) = load_run_config(common)?;
    let mut inputs = Inputs::load(&cfg, &common.config)?;
    let base = baseline(&cfg, &mut inputs)?;
    let mut runs = Vec::new();
    for entry in &cfg.estimators {
        progress(&format!("weighting {}", entry.method));
        runs.push(run_method(&cfg, &mut inputs, entry, false));
    }
    report_failures(&runs);

    let mut rows: Vec<(String, BalanceReport)> = base
        .iter()
        .map(|r| ("unweighted".to_string(), r.clone()))
        .collect();
    for r in &runs {
        if let Ok(f) = &r.outcome {
            rows.extend(
                f.balance
                    .iter()
                    .map(|b| (r.method.name().to_string(), b.clone())),
            );
        }
    }
    let mut out = OutDir::create(&out_dir(common, cfg.output_dir.as_ref(), "clusterbw-out"))?;
    out.csv("balance.csv", &prov, |buf| write_balance_csv(buf, &rows))?;

    #[derive(Serialize)]
    struct Body<'a> {
        dataset: DatasetInfo,
        unweighted: Vec<BalanceSummary>,
        results: Vec<MethodDetail<'a>>,
    }
    let body = Body {
        dataset: dataset_info(&cfg, common, &inputs),
        unweighted: base
            .iter()
            .map(|b| BalanceSummary::new("unweighted", b))
            .collect(),
        results: runs.iter().map(detail).collect(),
    };
    out.json("balance.json", &prov, &body)?;
    write_weights(&mut out, &prov, &runs)?;
    if all_failed(&runs) {
        return Err(CliError::AllFailed(out.written));
    }
    Ok(out.written)
}

fn load_sim_config(common: &Common) -> Result<(SimConfig, Provenance), CliError> {
    let (bytes, text) = read_config(&common.config)?;
    let mut cfg: SimConfig = parse_json(&text)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let prov = Provenance::new(&bytes, cfg.seed);
    Ok((cfg, prov))
}

/// `simulate`: Monte Carlo summaries and per-replicate estimates.
pub fn simulate(common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let (cfg, prov) = load_sim_config(common)?;
    progress(&format!(
        "simulating {} replicates on {} threads",
        cfg.n_reps,
        rayon::current_num_threads()
    ));
    let step = (cfg.n_reps / 10).max(1);
    let total = cfg.n_reps;
    let report = move |done: usize| {
        if done.is_multiple_of(step) || done == total {
            progress(&format!("{done}/{total} replicates"));
        }
    };
    let result =
        run_monte_carlo(&cfg, Some(&report)).map_err(|e| CliError::Input(e.to_string()))?;

    let mut out = OutDir::create(&out_dir(common, None, "clusterbw-out"))?;
    out.csv("sim_results.csv", &prov, |buf| write_tidy_csv(buf, &result))?;
    out.csv("sim_reps.csv", &prov, |buf| write_reps_csv(buf, &result))?;
    #[derive(Serialize)]
    struct Body<'a> {
        config: &'a SimConfig,
        summaries: &'a [MethodSummary],
    }
    out.json(
        "sim_summary.json",
        &prov,
        &Body {
            config: &result.config,
            summaries: &result.summaries,
        },
    )?;
    if result.summaries.iter().all(|s| s.n_ok == 0) {
        return Err(CliError::AllFailed(out.written));
    }
    Ok(out.written)
}

/// `validate`: parses the config and, for run configs, loads the dataset
/// and builds the features. Prints a short report to stdout.
pub fn validate(common: &Common) -> Result<Vec<String>, CliError> {
    let (_, text) = read_config(&common.config)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let is_run = value.get("input").is_some();
    let mut lines = Vec::new();
    if is_run {
        let (cfg, prov) = load_run_config(common)?;
        let mut inputs = Inputs::load(&cfg, &common.config)?;
        lines.push("kind=run".to_string());
        lines.push(format!("config_sha256={}", prov.config_sha256));
        lines.push(format!(
            "n={} n_treated={} n_control={} clusters={} degenerate_clusters={}",
            inputs.full.n(),
            inputs.full.n1(),
            inputs.full.n0(),
            inputs.full.cluster_count(),
            inputs.full.degenerate_cluster_count()
        ));
        for entry in &cfg.estimators {
            let mode = Inputs::filter_for(&cfg, Some(entry.method));
            let p = inputs.prepared(mode).map_err(CliError::Input)?;
            lines.push(format!(
                "{}: n={} clusters={} features={} sufficient={} interactions={}",
                entry.method,
                p.ds.n(),
                p.ds.cluster_count(),
                p.features.d(),
                p.features.s_bar.matrix.ncols(),
                p.features.psi.matrix.ncols()
            ));
        }
    } else {
        let (cfg, prov) = load_sim_config(common)?;
        lines.push("kind=simulate".to_string());
        lines.push(format!("config_sha256={}", prov.config_sha256));
        lines.push(format!(
            "n_reps={} n_clusters={} units_per_cluster={} rho_u={} seed={}",
            cfg.n_reps, cfg.n_clusters, cfg.units_per_cluster, cfg.rho_u, cfg.seed
        ));
        let names: Vec<&str> = cfg.estimators.iter().map(|m| m.name()).collect();
        lines.push(format!("estimators={}", names.join(",")));
    }
    Ok(lines)
}
