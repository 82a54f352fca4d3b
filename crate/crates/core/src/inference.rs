//! ATT point estimates, outcome-model bias correction, residualized variance
//! and normal confidence intervals.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::diagnostics::ess;
use crate::error::{Error, Result};
use crate::estimators::{Method, WeightSolution};
use crate::features::{broadcast_to_units, FeatureSet};
use crate::fmt::num;

/// Relative tolerance on |Σγ − n1| before Hájek normalization kicks in.
pub const SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeAssumption {
    /// Intercept and φ.
    XOnly,
    /// Cluster indicators and φ.
    XClusterFe,
    /// Intercept, φ and S̄.
    XSbar,
    /// Cluster indicators, φ and S̄.
    XSbarClusterFe,
}

impl OutcomeAssumption {
    pub fn name(self) -> &'static str {
        match self {
            OutcomeAssumption::XOnly => "x-only",
            OutcomeAssumption::XClusterFe => "x-cluster-fe",
            OutcomeAssumption::XSbar => "x-sbar",
            OutcomeAssumption::XSbarClusterFe => "x-sbar-cluster-fe",
        }
    }

    fn fixed_effects(self) -> bool {
        matches!(
            self,
            OutcomeAssumption::XClusterFe | OutcomeAssumption::XSbarClusterFe
        )
    }

    fn sbar(self) -> bool {
        matches!(
            self,
            OutcomeAssumption::XSbar | OutcomeAssumption::XSbarClusterFe
        )
    }
}

/// Least-squares outcome model fitted on controls.
#[derive(Debug, Clone, Serialize)]
pub struct OutcomeFit {
    pub assumption: OutcomeAssumption,
    pub column_names: Vec<String>,
    /// Coefficients of the retained columns; `None` for aliased columns.
    pub coefficients: Vec<Option<f64>>,
    pub dropped_columns: Vec<String>,
    /// m̂ for every unit in dataset order.
    pub predictions: Vec<f64>,
    /// SSR / (n0 − rank); zero when the fit is saturated.
    pub residual_variance: f64,
    pub rank: usize,
    /// Clusters without controls, predicted with the mean fixed effect.
    pub absent_clusters: usize,
    pub warnings: Vec<String>,
}

/// Indices of columns kept when scanning left to right and dropping any
/// column that is (numerically) in the span of the ones before it.
fn independent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm0 = col.norm();
        if !(norm0 > 0.0) {
            continue;
        }
        let mut v = col;
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let r = v.norm();
        if r > 1e-9 * norm0 {
            basis.push(v / r);
            keep.push(j);
        }
    }
    keep
}

/// Fits the outcome model for `assumption` on the control units and predicts
/// for every unit.
pub fn fit_outcome_model(
    ds: &Dataset,
    features: &FeatureSet,
    assumption: OutcomeAssumption,
) -> Result<OutcomeFit> {
    let phi = &features.phi.matrix;
    if phi.nrows() != ds.n() {
        return Err(Error::Dimension(
            "feature set was built from a different dataset".into(),
        ));
    }
    let n = ds.n();
    let k = ds.cluster_count();
    let controls = ds.control_indices();
    let n0 = controls.len();

    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut names = Vec::new();
    let mut fe_cluster = Vec::new();
    let mut warnings = Vec::new();
    let absent: Vec<bool> = ds.clusters().iter().map(|c| c.n_control == 0).collect();
    if assumption.fixed_effects() {
        for (g, c) in ds.clusters().iter().enumerate() {
            if absent[g] {
                continue;
            }
            cols.push(DVector::from_fn(n, |i, _| {
                if ds.cluster_of(i) == g {
                    1.0
                } else {
                    0.0
                }
            }));
            names.push(format!("cluster[{}]", c.id));
            fe_cluster.push(g);
        }
    } else {
        cols.push(DVector::from_element(n, 1.0));
        names.push("(intercept)".to_string());
    }
    let fe_count = cols.len();
    for j in 0..phi.ncols() {
        cols.push(phi.column(j).into_owned());
        names.push(features.phi.names[j].clone());
    }
    if assumption.sbar() {
        let s = broadcast_to_units(ds, &features.s_bar.matrix);
        for j in 0..s.ncols() {
            cols.push(s.column(j).into_owned());
            names.push(features.s_bar.names[j].clone());
        }
    }
    let p = cols.len();
    let full = DMatrix::from_fn(n, p, |i, j| cols[j][i]);
    let xc = DMatrix::from_fn(n0, p, |r, j| full[(controls[r], j)]);
    let yc = DVector::from_iterator(n0, controls.iter().map(|&i| ds.unit(i).outcome));

    let keep = independent_columns(&xc);
    let dropped: Vec<String> = (0..p)
        .filter(|j| !keep.contains(j))
        .map(|j| names[j].clone())
        .collect();
    if !dropped.is_empty() {
        warnings.push(format!(
            "dropped aliased outcome-model columns: {}",
            dropped.join(", ")
        ));
    }
    let xk = xc.select_columns(&keep);
    let beta = if keep.is_empty() {
        DVector::zeros(0)
    } else {
        xk.clone()
            .svd(true, true)
            .solve(&yc, 1e-12)
            .map_err(|e| Error::Numerical(format!("outcome regression failed: {e}")))?
    };
    let resid = &yc - &xk * &beta;
    let ssr = resid.norm_squared();
    let rank = keep.len();
    let residual_variance = if n0 > rank {
        ssr / (n0 - rank) as f64
    } else {
        0.0
    };

    let mut coefficients = vec![None; p];
    for (a, &j) in keep.iter().enumerate() {
        coefficients[j] = Some(beta[a]);
    }
    // Units in clusters without controls get the mean of the estimated
    // cluster effects.
    let fe_values: Vec<f64> = (0..fe_count).filter_map(|j| coefficients[j]).collect();
    let fe_mean = if fe_values.is_empty() {
        0.0
    } else {
        fe_values.iter().sum::<f64>() / fe_values.len() as f64
    };
    let mut fe_of_cluster = vec![None; k];
    if assumption.fixed_effects() {
        for (j, &g) in fe_cluster.iter().enumerate() {
            fe_of_cluster[g] = Some(coefficients[j].unwrap_or(fe_mean));
        }
    }
    let absent_clusters = if assumption.fixed_effects() {
        absent.iter().filter(|&&a| a).count()
    } else {
        0
    };
    if absent_clusters > 0 {
        warnings.push(format!(
            "{absent_clusters} cluster(s) without controls predicted with the mean cluster effect"
        ));
    }
    let predictions = (0..n)
        .map(|i| {
            let mut m = 0.0;
            for j in fe_count..p {
                if let Some(b) = coefficients[j] {
                    m += b * full[(i, j)];
                }
            }
            if assumption.fixed_effects() {
                m += fe_of_cluster[ds.cluster_of(i)].unwrap_or(fe_mean);
            } else if let Some(b) = coefficients[0] {
                m += b;
            }
            m
        })
        .collect();

    Ok(OutcomeFit {
        assumption,
        column_names: names,
        coefficients,
        dropped_columns: dropped,
        predictions,
        residual_variance,
        rank,
        absent_clusters,
        warnings,
    })
}

/// Control weights used for estimation: γ as given, or rescaled to sum to
/// n1 when Σγ is off by more than the tolerance.
pub fn effective_gamma(ds: &Dataset, ws: &WeightSolution) -> Result<(Vec<f64>, bool)> {
    let n1 = ds.n1() as f64;
    if n1 == 0.0 {
        return Err(Error::EstimandUndefined("no treated units".into()));
    }
    let s = ws.sum_gamma;
    if (s - n1).abs() > SUM_TOL * n1 {
        if !(s > 0.0) {
            return Err(Error::InvalidInput("control weights sum to zero".into()));
        }
        Ok((ws.gamma.iter().map(|g| g * n1 / s).collect(), true))
    } else {
        Ok((ws.gamma.clone(), false))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttEstimate {
    pub mu1: f64,
    pub mu0: f64,
    pub att: f64,
    pub hajek_normalized: bool,
}

/// μ1 = treated mean, μ0 = (1/n1) Σ γ Y over controls.
pub fn att_estimate(ds: &Dataset, ws: &WeightSolution) -> Result<AttEstimate> {
    let (gamma, hajek) = effective_gamma(ds, ws)?;
    let n1 = ds.n1() as f64;
    let mu1 = ds
        .treated_indices()
        .iter()
        .map(|&i| ds.unit(i).outcome)
        .sum::<f64>()
        / n1;
    let mu0 = ws
        .control_indices
        .iter()
        .zip(&gamma)
        .map(|(&i, g)| g * ds.unit(i).outcome)
        .sum::<f64>()
        / n1;
    Ok(AttEstimate {
        mu1,
        mu0,
        att: mu1 - mu0,
        hajek_normalized: hajek,
    })
}

/// μ0ᵇᶜ = (1/n1) Σ_treated m̂ + (1/n1) Σ_controls γ (Y − m̂).
pub fn bias_corrected_mu0(ds: &Dataset, ws: &WeightSolution, m_hat: &[f64]) -> Result<f64> {
    if m_hat.len() != ds.n() {
        return Err(Error::Dimension(
            "outcome predictions must cover every unit".into(),
        ));
    }
    let (gamma, _) = effective_gamma(ds, ws)?;
    let n1 = ds.n1() as f64;
    let treated: f64 = ds.treated_indices().iter().map(|&i| m_hat[i]).sum();
    let resid: f64 = ws
        .control_indices
        .iter()
        .zip(&gamma)
        .map(|(&i, g)| g * (ds.unit(i).outcome - m_hat[i]))
        .sum();
    Ok((treated + resid) / n1)
}

/// Bias-corrected ATT with μ1 unchanged.
pub fn bias_corrected_estimate(
    ds: &Dataset,
    ws: &WeightSolution,
    m_hat: &[f64],
) -> Result<AttEstimate> {
    let plain = att_estimate(ds, ws)?;
    let mu0 = bias_corrected_mu0(ds, ws, m_hat)?;
    Ok(AttEstimate {
        mu0,
        att: plain.mu1 - mu0,
        ..plain
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RveVariance {
    pub v1: f64,
    pub v0: f64,
    /// Extra term for the population ATT, (1/n1²) Σ_treated (m̂ − μ0)².
    pub population_term: f64,
}

/// V1 = (1/n1²) Σ_treated (Y − μ1)², V0 = Σ γ²(Y − m̂)² / (Σγ)².
pub fn rve_variance(
    ds: &Dataset,
    ws: &WeightSolution,
    m_hat: &[f64],
    mu0: f64,
) -> Result<RveVariance> {
    if m_hat.len() != ds.n() {
        return Err(Error::Dimension(
            "outcome predictions must cover every unit".into(),
        ));
    }
    let n1 = ds.n1() as f64;
    if n1 == 0.0 {
        return Err(Error::EstimandUndefined("no treated units".into()));
    }
    let treated = ds.treated_indices();
    let mu1 = treated.iter().map(|&i| ds.unit(i).outcome).sum::<f64>() / n1;
    let v1 = treated
        .iter()
        .map(|&i| (ds.unit(i).outcome - mu1).powi(2))
        .sum::<f64>()
        / (n1 * n1);
    let s: f64 = ws.gamma.iter().sum();
    let v0 = if s > 0.0 {
        ws.control_indices
            .iter()
            .zip(&ws.gamma)
            .map(|(&i, g)| g * g * (ds.unit(i).outcome - m_hat[i]).powi(2))
            .sum::<f64>()
            / (s * s)
    } else {
        f64::NAN
    };
    let population_term = treated
        .iter()
        .map(|&i| (m_hat[i] - mu0).powi(2))
        .sum::<f64>()
        / (n1 * n1);
    Ok(RveVariance {
        v1,
        v0,
        population_term,
    })
}

/// Upper α/2 standard normal quantile.
pub fn normal_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(1.0 - alpha / 2.0))
}

/// att ± z_{α/2} √(v1 + v0).
pub fn confidence_interval(att: f64, v1: f64, v0: f64, alpha: f64) -> Result<(f64, f64)> {
    let v = v1 + v0;
    if !(v >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "variance must be ≥ 0, got {v}"
        )));
    }
    let half = normal_quantile(alpha)? * v.sqrt();
    Ok((att - half, att + half))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectOptions {
    pub alpha: f64,
    pub bias_correct: bool,
    /// Outcome-model covariate set; defaults to the method's assumption.
    pub assumption: Option<OutcomeAssumption>,
}

impl Default for EffectOptions {
    fn default() -> Self {
        EffectOptions {
            alpha: 0.05,
            bias_correct: true,
            assumption: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectEstimate {
    pub method: Method,
    pub mu1: f64,
    pub mu0: f64,
    pub att: f64,
    pub v1: f64,
    pub v0: f64,
    pub population_variance_term: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    pub bias_corrected: bool,
    pub outcome_model_spec: OutcomeAssumption,
    pub ess_control: f64,
    pub hajek_normalized: bool,
    pub warnings: Vec<String>,
}

/// Point estimate, RVE variance and interval for one weight solution.
pub fn estimate_effect(
    ds: &Dataset,
    features: &FeatureSet,
    ws: &WeightSolution,
    opts: &EffectOptions,
) -> Result<EffectEstimate> {
    let assumption = opts
        .assumption
        .unwrap_or_else(|| ws.method.outcome_assumption());
    let fit = fit_outcome_model(ds, features, assumption)?;
    let point = if opts.bias_correct {
        bias_corrected_estimate(ds, ws, &fit.predictions)?
    } else {
        att_estimate(ds, ws)?
    };
    let var = rve_variance(ds, ws, &fit.predictions, point.mu0)?;
    let (ci_low, ci_high) = confidence_interval(point.att, var.v1, var.v0, opts.alpha)?;
    let mut warnings = ws.warnings.clone();
    warnings.extend(fit.warnings);
    if point.hajek_normalized {
        warnings.push(format!(
            "control weights sum to {} instead of n1 = {}; normalized",
            ws.sum_gamma,
            ds.n1()
        ));
    }
    Ok(EffectEstimate {
        method: ws.method,
        mu1: point.mu1,
        mu0: point.mu0,
        att: point.att,
        v1: var.v1,
        v0: var.v0,
        population_variance_term: var.population_term,
        ci_low,
        ci_high,
        alpha: opts.alpha,
        bias_corrected: opts.bias_correct,
        outcome_model_spec: assumption,
        ess_control: ess(&ws.gamma)?,
        hajek_normalized: point.hajek_normalized,
        warnings,
    })
}

/// Effect-comparison table `method,att,ci_low,ci_high,ess`.
pub fn write_effects_csv<W: Write>(out: W, effects: &[EffectEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "att", "ci_low", "ci_high", "ess"])?;
    for e in effects {
        w.write_record([
            e.method.name().to_string(),
            num(e.att),
            num(e.ci_low),
            num(e.ci_high),
            num(e.ess_control),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}
