//! Balance and overlap diagnostics: standardized mean differences, their
//! L2 aggregates, percentage bias reduction and effective sample size.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::WeightSolution;
use crate::features::{broadcast_to_units, FeatureSet};
use crate::fmt::{num, opt};

/// Standardized mean differences, global and per cluster. `None` marks an
/// entry that is undefined (zero pooled sd, or a cluster lacking an arm).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Smd {
    pub global: Vec<Option<f64>>,
    /// cluster × feature.
    pub local: Vec<Vec<Option<f64>>>,
    pub warnings: Vec<String>,
}

impl Smd {
    pub fn missing_local(&self) -> usize {
        self.local.iter().flatten().filter(|v| v.is_none()).count()
    }
}

/// Sample mean and variance (n − 1 denominator; 0 for a single value).
fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN, 0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0, 1);
    }
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (n - 1) as f64, n)
}

/// SMD of one column over a subset of units. `weights` holds per-unit weights
/// (controls only are read); `None` means unweighted.
fn smd_subset(
    x: &DMatrix<f64>,
    col: usize,
    members: &[usize],
    treated: &[bool],
    weights: Option<&[f64]>,
) -> Option<f64> {
    let t = members
        .iter()
        .filter(|&&i| treated[i])
        .map(|&i| x[(i, col)]);
    let c = members
        .iter()
        .filter(|&&i| !treated[i])
        .map(|&i| x[(i, col)]);
    let (mt, vt, nt) = mean_var(t);
    let (mc, vc, nc) = mean_var(c);
    if nt == 0 || nc == 0 {
        return None;
    }
    let s = (0.5 * (vt + vc)).sqrt();
    if !(s > 0.0) {
        return None;
    }
    let control_mean = match weights {
        None => mc,
        Some(w) => {
            let (mut sw, mut swx) = (0.0, 0.0);
            for &i in members.iter().filter(|&&i| !treated[i]) {
                sw += w[i];
                swx += w[i] * x[(i, col)];
            }
            if !(sw > 0.0) {
                return None;
            }
            swx / sw
        }
    };
    Some((mt - control_mean) / s)
}

/// SMDs of every column of `x` (n × p). The pooled sd always comes from the
/// unweighted treated and control samples; the weighted control mean is
/// Σγx/Σγ.
pub fn smd(
    ds: &Dataset,
    x: &DMatrix<f64>,
    names: &[String],
    weights: Option<&[f64]>,
) -> Result<Smd> {
    if x.nrows() != ds.n() {
        return Err(Error::Dimension(
            "feature matrix rows differ from dataset size".into(),
        ));
    }
    if let Some(w) = weights {
        if w.len() != ds.n() {
            return Err(Error::Dimension(
                "weight vector length differs from dataset size".into(),
            ));
        }
    }
    let treated: Vec<bool> = ds.units().iter().map(|u| u.treated).collect();
    let all: Vec<usize> = (0..ds.n()).collect();
    let mut warnings = Vec::new();
    let global: Vec<Option<f64>> = (0..x.ncols())
        .map(|j| {
            let v = smd_subset(x, j, &all, &treated, weights);
            if v.is_none() {
                let name = names.get(j).map(String::as_str).unwrap_or("?");
                warnings.push(format!("feature {name} has zero pooled sd; excluded"));
            }
            v
        })
        .collect();
    let local = ds
        .clusters()
        .iter()
        .map(|c| {
            (0..x.ncols())
                .map(|j| smd_subset(x, j, &c.members, &treated, weights))
                .collect()
        })
        .collect();
    Ok(Smd {
        global,
        local,
        warnings,
    })
}

/// Root mean square over the available entries.
pub fn l2(entries: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = entries.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidInput(
            "no SMD entries available for aggregation".into(),
        ));
    }
    Ok((present.iter().map(|v| v * v).sum::<f64>() / present.len() as f64).sqrt())
}

/// (L2 global, L2 local).
pub fn l2_aggregate(smd: &Smd) -> Result<(f64, f64)> {
    let local: Vec<Option<f64>> = smd.local.iter().flatten().copied().collect();
    Ok((l2(&smd.global)?, l2(&local)?))
}

/// Percentage bias reduction 100·(1 − weighted/unweighted); `None` when the
/// unweighted value is zero.
pub fn pbr(unweighted: f64, weighted: f64) -> Option<f64> {
    if unweighted > 0.0 && unweighted.is_finite() {
        Some(100.0 * (1.0 - weighted / unweighted))
    } else {
        None
    }
}

/// Kish effective sample size (Σγ)²/Σγ².
pub fn ess(weights: &[f64]) -> Result<f64> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidInput(
            "ESS requires finite nonnegative weights".into(),
        ));
    }
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if !(s2 > 0.0) {
        return Err(Error::InvalidInput(
            "ESS is undefined for all-zero weights".into(),
        ));
    }
    Ok(s * s / s2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalanceBlock {
    /// Unit-level features φ.
    Unit,
    /// Cluster sufficient statistics S̄, broadcast to units.
    Cluster,
    /// Interactions ψ.
    Interaction,
}

impl BalanceBlock {
    pub fn name(self) -> &'static str {
        match self {
            BalanceBlock::Unit => "unit",
            BalanceBlock::Cluster => "cluster",
            BalanceBlock::Interaction => "interaction",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BalanceReport {
    pub block: BalanceBlock,
    pub feature_names: Vec<String>,
    pub cluster_ids: Vec<String>,
    pub weighted_flag: bool,
    /// Weighted SMDs when weights were supplied, unweighted otherwise.
    pub smd: Smd,
    pub smd_unweighted: Smd,
    pub l2_global: Option<f64>,
    pub l2_local: Option<f64>,
    pub l2_global_unweighted: Option<f64>,
    pub l2_local_unweighted: Option<f64>,
    pub pbr_global: Option<f64>,
    pub pbr_local: Option<f64>,
    pub missing_local: usize,
    pub ess_control: f64,
}

/// Builds the report for one feature block; `ws = None` gives the unweighted
/// report.
pub fn balance_report(
    ds: &Dataset,
    features: &FeatureSet,
    block: BalanceBlock,
    ws: Option<&WeightSolution>,
) -> Result<BalanceReport> {
    let (x, names) = match block {
        BalanceBlock::Unit => (features.phi.matrix.clone(), features.phi.names.clone()),
        BalanceBlock::Cluster => (
            broadcast_to_units(ds, &features.s_bar.matrix),
            features.s_bar.names.clone(),
        ),
        BalanceBlock::Interaction => (features.psi.matrix.clone(), features.psi.names.clone()),
    };
    let unit_weights = ws.map(|w| w.unit_weights(ds));
    let unweighted = smd(ds, &x, &names, None)?;
    let weighted = match &unit_weights {
        Some(w) => smd(ds, &x, &names, Some(w))?,
        None => unweighted.clone(),
    };
    let local = |s: &Smd| l2(&s.local.iter().flatten().copied().collect::<Vec<_>>()).ok();
    let l2_global = l2(&weighted.global).ok();
    let l2_local = local(&weighted);
    let l2_global_unweighted = l2(&unweighted.global).ok();
    let l2_local_unweighted = local(&unweighted);
    let ratio = |u: Option<f64>, w: Option<f64>| match (u, w) {
        (Some(u), Some(w)) => pbr(u, w),
        _ => None,
    };
    let ess_control = match ws {
        Some(w) => ess(&w.gamma)?,
        None => ds.n0() as f64,
    };
    Ok(BalanceReport {
        block,
        feature_names: names,
        cluster_ids: ds.clusters().iter().map(|c| c.id.clone()).collect(),
        weighted_flag: ws.is_some(),
        missing_local: weighted.missing_local(),
        pbr_global: ws.and(ratio(l2_global_unweighted, l2_global)),
        pbr_local: ws.and(ratio(l2_local_unweighted, l2_local)),
        smd: weighted,
        smd_unweighted: unweighted,
        l2_global,
        l2_local,
        l2_global_unweighted,
        l2_local_unweighted,
        ess_control,
    })
}

/// Long-format rows `method,block,cluster,feature,smd_unweighted,smd`; the
/// cluster field is empty for global rows and missing SMDs are empty.
pub fn write_balance_csv<W: Write>(out: W, rows: &[(String, BalanceReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "block",
        "cluster",
        "feature",
        "smd_unweighted",
        "smd",
    ])?;
    for (method, r) in rows {
        for (j, name) in r.feature_names.iter().enumerate() {
            w.write_record([
                method.as_str(),
                r.block.name(),
                "",
                name,
                &opt(r.smd_unweighted.global[j]),
                &opt(r.smd.global[j]),
            ])?;
        }
        for (g, id) in r.cluster_ids.iter().enumerate() {
            for (j, name) in r.feature_names.iter().enumerate() {
                w.write_record([
                    method.as_str(),
                    r.block.name(),
                    id,
                    name,
                    &opt(r.smd_unweighted.local[g][j]),
                    &opt(r.smd.local[g][j]),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// Compact summary used for the JSON output.
#[derive(Debug, Clone, Serialize)]
pub struct BalanceSummary {
    pub method: String,
    pub block: BalanceBlock,
    pub weighted: bool,
    pub l2_global: Option<f64>,
    pub l2_local: Option<f64>,
    pub l2_global_unweighted: Option<f64>,
    pub l2_local_unweighted: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pbr_global: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pbr_local: Option<f64>,
    pub missing_local: usize,
    pub ess_control: f64,
    pub warnings: Vec<String>,
}

impl BalanceSummary {
    pub fn new(method: &str, r: &BalanceReport) -> Self {
        BalanceSummary {
            method: method.to_string(),
            block: r.block,
            weighted: r.weighted_flag,
            l2_global: r.l2_global,
            l2_local: r.l2_local,
            l2_global_unweighted: r.l2_global_unweighted,
            l2_local_unweighted: r.l2_local_unweighted,
            pbr_global: r.pbr_global,
            pbr_local: r.pbr_local,
            missing_local: r.missing_local,
            ess_control: r.ess_control,
            warnings: r.smd.warnings.clone(),
        }
    }
}

/// Formats a summary line for logs.
pub fn summary_line(s: &BalanceSummary) -> String {
    format!(
        "{} [{}] L2 global {} local {} ESS {}",
        s.method,
        s.block.name(),
        s.l2_global.map(num).unwrap_or_else(|| "NA".into()),
        s.l2_local.map(num).unwrap_or_else(|| "NA".into()),
        num(s.ess_control)
    )
}
