//! Clustered data generating process with an unobserved cluster-level
//! confounder, and the Monte Carlo driver comparing estimators on it.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{filter_degenerate_clusters, Dataset, FilterMode, Unit};
use crate::error::{Error, Result};
use crate::estimators::{
    declared_constraint_residual, estimate_weights, BalanceOptions, EstimatorOptions, Lambda,
    Method, RiIpwOptions,
};
use crate::features::FeatureSet;
use crate::fmt::num;
use crate::inference::{estimate_effect, EffectOptions};

pub const COVARIATES: usize = 10;
/// Zero-based indices of the covariates dichotomized at zero.
pub const BINARY_COVARIATES: [usize; 6] = [0, 2, 4, 5, 7, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterSizes {
    Fixed,
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_clusters: usize,
    pub units_per_cluster: usize,
    pub cluster_sizes: ClusterSizes,
    pub rho_u: f64,
    /// Outcome loading on U; 0.5 when ρ_U > 0 and 0 otherwise if unset.
    pub alpha_u: Option<f64>,
    pub beta0: f64,
    pub tau: f64,
    pub noise_variance: f64,
    pub n_reps: usize,
    pub seed: u64,
    pub estimators: Vec<Method>,
    pub lambda: Lambda,
    pub alpha: f64,
    pub bias_correct: bool,
    /// Rescale RI-IPW weights to average one within each cluster.
    pub ri_ipw_standardize: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_clusters: 100,
            units_per_cluster: 50,
            cluster_sizes: ClusterSizes::Fixed,
            rho_u: 0.0,
            alpha_u: None,
            beta0: 0.0,
            tau: -0.4,
            noise_variance: 2.0,
            n_reps: 200,
            seed: 20240101,
            estimators: vec![
                Method::StandardBw,
                Method::RiIpw,
                Method::HierarchicalBw,
                Method::MundlakGb,
            ],
            lambda: Lambda::Auto,
            alpha: 0.05,
            bias_correct: false,
            ri_ipw_standardize: true,
        }
    }
}

impl SimConfig {
    pub fn alpha_u(&self) -> f64 {
        self.alpha_u
            .unwrap_or(if self.rho_u > 0.0 { 0.5 } else { 0.0 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 {
            return Err(Error::InvalidInput("n_clusters must be at least 2".into()));
        }
        if self.units_per_cluster < 1 {
            return Err(Error::InvalidInput(
                "units_per_cluster must be at least 1".into(),
            ));
        }
        if self.n_reps < 1 {
            return Err(Error::InvalidInput("n_reps must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidInput("estimators must not be empty".into()));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::InvalidInput(
                "noise_variance must be finite and ≥ 0".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidInput("alpha must lie in (0, 1)".into()));
        }
        for v in [self.rho_u, self.beta0, self.tau, self.alpha_u()] {
            if !v.is_finite() {
                return Err(Error::InvalidInput("DGP parameters must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Quantities the estimators never see.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub u: Vec<f64>,
    /// True propensity per unit.
    pub propensity: Vec<f64>,
    pub tau: f64,
}

/// Random stream for one replicate; independent of execution order.
pub fn rep_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

/// Propensity index f(x, u) from covariates X1..X10 (zero-based here).
pub fn propensity_index(x: &[f64], u: f64, beta0: f64, rho_u: f64) -> f64 {
    beta0 + 0.8 * x[0] - 0.25 * x[1] + 0.6 * x[2] - 0.4 * x[3] - 0.8 * x[4] - 0.5 * x[5]
        + 0.7 * x[6]
        - 0.25 * x[1] * x[1]
        - 0.4 * x[3] * x[3]
        + 0.7 * x[6] * x[6]
        + 0.4 * x[0] * x[2]
        - 0.175 * x[1] * x[3]
        + 0.3 * x[2] * x[4]
        - 0.28 * x[3] * x[5]
        - 0.4 * x[4] * x[6]
        + 0.4 * x[0] * x[5]
        - 0.175 * x[1] * x[2]
        + 0.3 * x[2] * x[3]
        - 0.2 * x[3] * x[4]
        - 0.4 * x[4] * x[5]
        + rho_u * u
}

/// e = 0.8·logit⁻¹(f) + 0.15.
pub fn propensity(f: f64) -> f64 {
    0.8 / (1.0 + (-f).exp()) + 0.15
}

/// Outcome mean without the treatment effect and noise.
pub fn outcome_mean(x: &[f64], u: f64, alpha_u: f64) -> f64 {
    -3.85 + 0.3 * x[0] - 0.36 * x[1] - 0.73 * x[2] - 0.2 * x[3] + 0.71 * x[7] - 0.19 * x[8]
        + 0.26 * x[9]
        + alpha_u * u
}

/// Draws one dataset for replicate `rep`.
pub fn generate(cfg: &SimConfig, rep: usize) -> Result<(Dataset, SimTruth)> {
    cfg.validate()?;
    let mut rng = rep_rng(cfg.seed, rep);
    let noise = Normal::new(0.0, cfg.noise_variance.sqrt())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let alpha_u = cfg.alpha_u();
    let sizes: Vec<usize> = match cfg.cluster_sizes {
        ClusterSizes::Fixed => vec![cfg.units_per_cluster; cfg.n_clusters],
        ClusterSizes::Poisson => {
            let pois = Poisson::new(cfg.units_per_cluster as f64)
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
            (0..cfg.n_clusters)
                .map(|_| (pois.sample(&mut rng) as usize).max(1))
                .collect()
        }
    };
    let mut units = Vec::with_capacity(sizes.iter().sum());
    let mut us = Vec::with_capacity(cfg.n_clusters);
    let mut props = Vec::with_capacity(units.capacity());
    for (g, &size) in sizes.iter().enumerate() {
        let u: f64 = rng.sample(StandardNormal);
        us.push(u);
        for i in 0..size {
            let mut x: Vec<f64> = (0..COVARIATES)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            for &j in &BINARY_COVARIATES {
                x[j] = if x[j] >= 0.0 { 1.0 } else { 0.0 };
            }
            let e = propensity(propensity_index(&x, u, cfg.beta0, cfg.rho_u));
            let z = Bernoulli::new(e)
                .map_err(|err| Error::Numerical(err.to_string()))?
                .sample(&mut rng);
            let y = outcome_mean(&x, u, alpha_u)
                + if z { cfg.tau } else { 0.0 }
                + noise.sample(&mut rng);
            props.push(e);
            units.push(Unit {
                unit_id: format!("g{g}_u{i}"),
                cluster_id: format!("g{g}"),
                treated: z,
                outcome: y,
                covariates: x,
            });
        }
    }
    let names = (1..=COVARIATES).map(|j| format!("X{j}")).collect();
    let ds = Dataset::new(units, names)?;
    Ok((
        ds,
        SimTruth {
            u: us,
            propensity: props,
            tau: cfg.tau,
        },
    ))
}

/// One estimator's outcome on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepRecord {
    pub rep: usize,
    pub method: Method,
    /// `None` when the estimator failed; see `error`.
    pub estimate: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub ess: Option<f64>,
    pub constraint_residual: Option<f64>,
    pub min_gamma: Option<f64>,
    pub dropped_clusters: usize,
    pub dropped_units: usize,
    pub n_units: usize,
    pub error: Option<String>,
}

impl RepRecord {
    pub fn failed(rep: usize, method: Method, n_units: usize, message: String) -> Self {
        RepRecord {
            rep,
            method,
            estimate: None,
            ci_low: None,
            ci_high: None,
            ess: None,
            constraint_residual: None,
            min_gamma: None,
            dropped_clusters: 0,
            dropped_units: 0,
            n_units,
            error: Some(message),
        }
    }
}

fn estimator_options(cfg: &SimConfig) -> EstimatorOptions {
    EstimatorOptions {
        balance: BalanceOptions {
            lambda: cfg.lambda,
            ..BalanceOptions::default()
        },
        ri_ipw: RiIpwOptions {
            standardize_within_cluster: cfg.ri_ipw_standardize,
            ..RiIpwOptions::default()
        },
    }
}

/// Runs every configured estimator on replicate `rep`.
pub fn run_rep(cfg: &SimConfig, rep: usize) -> Result<Vec<RepRecord>> {
    let (ds, _) = generate(cfg, rep)?;
    let opts = estimator_options(cfg);
    let effect_opts = EffectOptions {
        alpha: cfg.alpha,
        bias_correct: cfg.bias_correct,
        assumption: None,
    };
    let n = ds.n();
    let mut full: Option<Result<FeatureSet>> = None;
    let mut filtered: Option<Result<(Dataset, FeatureSet, usize, usize)>> = None;
    let mut out = Vec::with_capacity(cfg.estimators.len());
    for &method in &cfg.estimators {
        let prepared: std::result::Result<(&Dataset, &FeatureSet, usize, usize), String> =
            if method.needs_nondegenerate_clusters() {
                let entry = filtered.get_or_insert_with(|| {
                    let report = filter_degenerate_clusters(&ds, FilterMode::DropBoth)?;
                    let f = FeatureSet::default_for(&report.retained)?;
                    Ok((
                        report.retained,
                        f,
                        report.dropped_clusters.len(),
                        report.dropped_unit_count,
                    ))
                });
                match entry {
                    Ok((d, f, c, u)) => Ok((&*d, &*f, *c, *u)),
                    Err(e) => Err(e.to_string()),
                }
            } else {
                match full.get_or_insert_with(|| FeatureSet::default_for(&ds)) {
                    Ok(f) => Ok((&ds, &*f, 0, 0)),
                    Err(e) => Err(e.to_string()),
                }
            };
        let record = match prepared {
            Err(msg) => RepRecord::failed(rep, method, n, msg),
            Ok((d, f, dc, du)) => {
                let result = estimate_weights(d, f, method, &opts)
                    .and_then(|ws| estimate_effect(d, f, &ws, &effect_opts).map(|e| (ws, e)));
                match result {
                    Ok((ws, e)) => RepRecord {
                        rep,
                        method,
                        estimate: Some(e.att),
                        ci_low: Some(e.ci_low),
                        ci_high: Some(e.ci_high),
                        ess: Some(e.ess_control),
                        constraint_residual: Some(declared_constraint_residual(d, f, &ws)),
                        min_gamma: ws.gamma.iter().copied().reduce(f64::min),
                        dropped_clusters: dc,
                        dropped_units: du,
                        n_units: n,
                        error: None,
                    },
                    Err(err) => {
                        let mut r = RepRecord::failed(rep, method, n, err.to_string());
                        r.dropped_clusters = dc;
                        r.dropped_units = du;
                        r
                    }
                }
            }
        };
        out.push(record);
    }
    Ok(out)
}

/// Aggregate performance of one estimator across replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub failure_rate: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    /// |mean(estimate − τ) / τ|.
    pub standardized_abs_bias: f64,
    /// Monte Carlo standard error of the bias.
    pub bias_mc_se: f64,
    pub rmse: f64,
    pub ci_coverage: f64,
    pub mean_ci_width: f64,
    pub mean_ess: f64,
    pub mean_dropped_clusters: f64,
    /// Mean share of units removed by cluster filtering.
    pub drop_rate: f64,
    pub max_constraint_residual: f64,
    pub min_gamma: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Aggregates the records of one method. Failed replicates are excluded
/// from every metric except the failure rate.
pub fn summarize(method: Method, records: &[RepRecord], tau: f64) -> MethodSummary {
    let mine: Vec<&RepRecord> = records.iter().filter(|r| r.method == method).collect();
    let ok: Vec<&RepRecord> = mine
        .iter()
        .copied()
        .filter(|r| r.estimate.is_some())
        .collect();
    let errors: Vec<f64> = ok.iter().map(|r| r.estimate.unwrap() - tau).collect();
    let bias = mean(&errors);
    let n = errors.len() as f64;
    let sd = if errors.len() > 1 {
        (errors.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    let covered: Vec<f64> = ok
        .iter()
        .map(|r| {
            let (lo, hi) = (r.ci_low.unwrap(), r.ci_high.unwrap());
            if lo <= tau && tau <= hi {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let widths: Vec<f64> = ok
        .iter()
        .map(|r| r.ci_high.unwrap() - r.ci_low.unwrap())
        .collect();
    let ess: Vec<f64> = ok.iter().filter_map(|r| r.ess).collect();
    let dropped: Vec<f64> = mine.iter().map(|r| r.dropped_clusters as f64).collect();
    let drop_share: Vec<f64> = mine
        .iter()
        .map(|r| r.dropped_units as f64 / r.n_units.max(1) as f64)
        .collect();
    MethodSummary {
        method,
        n_ok: ok.len(),
        n_failed: mine.len() - ok.len(),
        failure_rate: if mine.is_empty() {
            f64::NAN
        } else {
            (mine.len() - ok.len()) as f64 / mine.len() as f64
        },
        mean_estimate: bias + tau,
        bias,
        standardized_abs_bias: (bias / tau).abs(),
        bias_mc_se: sd / n.sqrt(),
        rmse: mean(&errors.iter().map(|e| e * e).collect::<Vec<_>>()).sqrt(),
        ci_coverage: mean(&covered),
        mean_ci_width: mean(&widths),
        mean_ess: mean(&ess),
        mean_dropped_clusters: mean(&dropped),
        drop_rate: mean(&drop_share),
        max_constraint_residual: ok
            .iter()
            .filter_map(|r| r.constraint_residual)
            .fold(0.0, f64::max),
        min_gamma: ok
            .iter()
            .filter_map(|r| r.min_gamma)
            .fold(f64::INFINITY, f64::min),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimResult {
    pub config: SimConfig,
    pub summaries: Vec<MethodSummary>,
    pub reps: Vec<RepRecord>,
}

impl SimResult {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }
}

/// Runs all replicates on the current rayon pool. `progress` is called with
/// the number of finished replicates.
pub fn run_monte_carlo(
    cfg: &SimConfig,
    progress: Option<&(dyn Fn(usize) + Sync)>,
) -> Result<SimResult> {
    cfg.validate()?;
    let done = std::sync::atomic::AtomicUsize::new(0);
    let per_rep: Vec<Result<Vec<RepRecord>>> = (0..cfg.n_reps)
        .into_par_iter()
        .map(|rep| {
            let r = run_rep(cfg, rep);
            let k = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            if let Some(p) = progress {
                p(k);
            }
            r
        })
        .collect();
    let mut reps = Vec::with_capacity(cfg.n_reps * cfg.estimators.len());
    for r in per_rep {
        reps.extend(r?);
    }
    let summaries = cfg
        .estimators
        .iter()
        .map(|&m| summarize(m, &reps, cfg.tau))
        .collect();
    Ok(SimResult {
        config: cfg.clone(),
        summaries,
        reps,
    })
}

/// Tidy table `estimator,rho_U,metric,value`.
pub fn write_tidy_csv<W: Write>(out: W, result: &SimResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["estimator", "rho_U", "metric", "value"])?;
    let rho = num(result.config.rho_u);
    for s in &result.summaries {
        let metrics: [(&str, f64); 14] = [
            ("standardized_abs_bias", s.standardized_abs_bias),
            ("bias", s.bias),
            ("bias_mc_se", s.bias_mc_se),
            ("rmse", s.rmse),
            ("ci_coverage", s.ci_coverage),
            ("mean_ci_width", s.mean_ci_width),
            ("mean_ess", s.mean_ess),
            ("failure_rate", s.failure_rate),
            ("n_ok", s.n_ok as f64),
            ("mean_dropped_clusters", s.mean_dropped_clusters),
            ("drop_rate", s.drop_rate),
            ("max_constraint_residual", s.max_constraint_residual),
            ("min_gamma", s.min_gamma),
            ("mean_estimate", s.mean_estimate),
        ];
        for (name, v) in metrics {
            w.write_record([s.method.name(), &rho, name, &num(v)])?;
        }
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// One row per (replicate, estimator).
pub fn write_reps_csv<W: Write>(out: W, result: &SimResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "rep",
        "estimator",
        "estimate",
        "ci_low",
        "ci_high",
        "ess",
        "constraint_residual",
        "dropped_clusters",
        "dropped_units",
        "error",
    ])?;
    let o = crate::fmt::opt;
    for r in &result.reps {
        w.write_record([
            r.rep.to_string(),
            r.method.name().to_string(),
            o(r.estimate),
            o(r.ci_low),
            o(r.ci_high),
            o(r.ess),
            o(r.constraint_residual),
            r.dropped_clusters.to_string(),
            r.dropped_units.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            n_clusters: 4,
            units_per_cluster: 10,
            n_reps: 2,
            ..SimConfig::default()
        }
    }

    #[test]
    fn propensity_range() {
        for f in [-50.0, -1.0, 0.0, 2.0, 50.0] {
            let e = propensity(f);
            assert!((0.15..=0.95 + 1e-15).contains(&e));
        }
        assert!((propensity(0.0) - 0.55).abs() < 1e-15);
    }

    #[test]
    fn binary_columns_are_binary() {
        let (ds, truth) = generate(&small(), 0).unwrap();
        for u in ds.units() {
            for &j in &BINARY_COVARIATES {
                assert!(u.covariates[j] == 0.0 || u.covariates[j] == 1.0);
            }
        }
        assert_eq!(truth.u.len(), 4);
        assert_eq!(ds.n(), 40);
    }

    #[test]
    fn streams_depend_on_rep_only() {
        let cfg = small();
        let (a, _) = generate(&cfg, 1).unwrap();
        let (b, _) = generate(&cfg, 1).unwrap();
        let (c, _) = generate(&cfg, 0).unwrap();
        assert_eq!(a.outcomes(), b.outcomes());
        assert_ne!(a.outcomes(), c.outcomes());
    }

    #[test]
    fn alpha_u_default_follows_rho() {
        let mut cfg = small();
        assert_eq!(cfg.alpha_u(), 0.0);
        cfg.rho_u = 0.25;
        assert_eq!(cfg.alpha_u(), 0.5);
        cfg.alpha_u = Some(1.0);
        assert_eq!(cfg.alpha_u(), 1.0);
    }
}
