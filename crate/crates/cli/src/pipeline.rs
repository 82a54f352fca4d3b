//! Shared estimation pipeline behind `estimate` and `balance`.

use std::collections::HashMap;
use std::path::Path;

use clusterbw::data::{filter_degenerate_clusters, load_csv, Dataset, DroppedCluster, FilterMode};
use clusterbw::diagnostics::{balance_report, BalanceBlock, BalanceReport};
use clusterbw::estimators::{
    estimate_weights, BalanceOptions, EstimatorOptions, Method, RiIpwOptions, WeightSolution,
};
use clusterbw::features::{FeatureSet, FeatureSpec, SufficientSpec};
use clusterbw::inference::{estimate_effect, EffectEstimate, EffectOptions};

use crate::config::{EstimatorEntry, RunConfig};
use crate::CliError;

/// Dataset after cluster filtering, with its features.
pub struct Prepared {
    pub ds: Dataset,
    pub features: FeatureSet,
    pub dropped: Vec<DroppedCluster>,
}

pub struct Inputs {
    pub full: Dataset,
    spec: FeatureSpec,
    s_spec: SufficientSpec,
    prepared: HashMap<FilterMode, Result<Prepared, String>>,
}

impl Inputs {
    pub fn load(cfg: &RunConfig, config_path: &Path) -> Result<Self, CliError> {
        let path = cfg.input_path(config_path);
        let full = load_csv(&path, &cfg.schema)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let spec = cfg.features.to_spec(&full)?;
        let s_spec = cfg.sufficient.to_spec(&full)?;
        Ok(Inputs {
            full,
            spec,
            s_spec,
            prepared: HashMap::new(),
        })
    }

    pub fn filter_for(cfg: &RunConfig, method: Option<Method>) -> FilterMode {
        match (cfg.cluster_filter, method) {
            (Some(mode), _) => mode,
            (None, Some(m)) if m.needs_nondegenerate_clusters() => FilterMode::DropBoth,
            _ => FilterMode::KeepAll,
        }
    }

    pub fn prepared(&mut self, mode: FilterMode) -> Result<&Prepared, String> {
        let (full, spec, s_spec) = (&self.full, &self.spec, &self.s_spec);
        let entry = self.prepared.entry(mode).or_insert_with(|| {
            let report = filter_degenerate_clusters(full, mode).map_err(|e| e.to_string())?;
            let features =
                FeatureSet::build(&report.retained, spec, s_spec).map_err(|e| e.to_string())?;
            Ok(Prepared {
                ds: report.retained,
                features,
                dropped: report.dropped_clusters,
            })
        });
        entry.as_ref().map_err(Clone::clone)
    }
}

pub struct MethodRun {
    pub method: Method,
    pub dropped: Vec<DroppedCluster>,
    pub outcome: Result<Fitted, String>,
}

pub struct Fitted {
    pub weights: WeightSolution,
    pub effect: Option<EffectEstimate>,
    pub balance: Vec<BalanceReport>,
    /// (unit_id, cluster_id) per control, aligned with the weights.
    pub control_ids: Vec<(String, String)>,
}

fn options(cfg: &RunConfig, entry: &EstimatorEntry) -> EstimatorOptions {
    EstimatorOptions {
        balance: BalanceOptions {
            lambda: entry.lambda.unwrap_or(cfg.lambda),
            penalty_fallback: cfg.penalty_fallback,
            ..BalanceOptions::default()
        },
        ri_ipw: RiIpwOptions {
            standardize_within_cluster: entry.standardize_within_cluster.unwrap_or(true),
            ..RiIpwOptions::default()
        },
    }
}

/// Fits one estimator; `with_effect` adds the effect estimate.
pub fn run_method(
    cfg: &RunConfig,
    inputs: &mut Inputs,
    entry: &EstimatorEntry,
    with_effect: bool,
) -> MethodRun {
    let method = entry.method;
    let p = match inputs.prepared(Inputs::filter_for(cfg, Some(method))) {
        Ok(p) => p,
        Err(e) => {
            return MethodRun {
                method,
                dropped: Vec::new(),
                outcome: Err(e),
            }
        }
    };
    let outcome = (|| -> clusterbw::Result<Fitted> {
        let weights = estimate_weights(&p.ds, &p.features, method, &options(cfg, entry))?;
        let effect = if with_effect {
            let opts = EffectOptions {
                alpha: cfg.alpha,
                bias_correct: cfg.bias_correct,
                assumption: cfg.outcome_model,
            };
            Some(estimate_effect(&p.ds, &p.features, &weights, &opts)?)
        } else {
            None
        };
        let balance = cfg
            .balance_blocks
            .iter()
            .map(|&b| balance_report(&p.ds, &p.features, b, Some(&weights)))
            .collect::<clusterbw::Result<_>>()?;
        let control_ids = weights
            .control_indices
            .iter()
            .map(|&i| {
                let u = p.ds.unit(i);
                (u.unit_id.clone(), u.cluster_id.clone())
            })
            .collect();
        Ok(Fitted {
            weights,
            effect,
            balance,
            control_ids,
        })
    })();
    MethodRun {
        method,
        dropped: p.dropped.clone(),
        outcome: outcome.map_err(|e| e.to_string()),
    }
}

/// Unweighted reports on the dataset every method shares when a global
/// filter is configured, otherwise on the full dataset.
pub fn baseline(cfg: &RunConfig, inputs: &mut Inputs) -> Result<Vec<BalanceReport>, CliError> {
    let p = inputs
        .prepared(Inputs::filter_for(cfg, None))
        .map_err(CliError::Input)?;
    cfg.balance_blocks
        .iter()
        .map(|&b: &BalanceBlock| balance_report(&p.ds, &p.features, b, None))
        .collect::<clusterbw::Result<_>>()
        .map_err(|e| CliError::Input(e.to_string()))
}
