//! Control-unit weights for the ATT under each supported method.
//!
//! Balancing-weight methods are posed as [`QpProblem`]s over the control
//! units (variable `j` is the `j`-th control in dataset order) and solved by
//! [`crate::qp::solve`]. The random-intercept IPW method lives in
//! [`ri_ipw`].

mod ri_ipw;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use ri_ipw::{fit_random_intercept_logit, ri_ipw_weights, RiIpwOptions, RiLogitFit};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::features::{broadcast_to_units, FeatureSet};
use crate::inference::{fit_outcome_model, OutcomeAssumption};
use crate::qp::{self, ObjectiveBlock, QpProblem, QpSolution, QpStatus, SolverOptions};

/// Weight given to equality rows when they are converted into penalties.
pub const PENALTY_WEIGHT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    StandardBw,
    RiIpw,
    HierarchicalBw,
    MundlakGb,
    MundlakAvto,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::StandardBw,
        Method::RiIpw,
        Method::HierarchicalBw,
        Method::MundlakGb,
        Method::MundlakAvto,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::StandardBw => "standard-bw",
            Method::RiIpw => "ri-ipw",
            Method::HierarchicalBw => "hierarchical-bw",
            Method::MundlakGb => "mundlak-gb",
            Method::MundlakAvto => "mundlak-avto",
        }
    }

    /// Methods whose constraints hold within every cluster and so need both
    /// arms present in each cluster.
    pub fn needs_nondegenerate_clusters(self) -> bool {
        matches!(self, Method::HierarchicalBw | Method::MundlakAvto)
    }

    /// Outcome-model covariate set matching the method's identification
    /// assumption.
    pub fn outcome_assumption(self) -> OutcomeAssumption {
        match self {
            Method::StandardBw => OutcomeAssumption::XOnly,
            Method::RiIpw | Method::HierarchicalBw => OutcomeAssumption::XClusterFe,
            Method::MundlakGb => OutcomeAssumption::XSbar,
            Method::MundlakAvto => OutcomeAssumption::XSbarClusterFe,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MundlakVariant {
    /// Exact balance of the cluster sufficient statistics.
    #[serde(rename = "GB")]
    GlobalBalance,
    /// Weights average to one within every cluster.
    #[serde(rename = "AvTO")]
    AverageToOne,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SolverMeta {
    Qp {
        status: QpStatus,
        primal_residual: f64,
        kkt_residual: f64,
        objective_value: f64,
        iterations: usize,
        /// Equality constraints were infeasible and converted to penalties.
        penalty_fallback: bool,
    },
    Logistic {
        converged: bool,
        outer_iterations: usize,
        sigma2: f64,
        standardized_within_cluster: bool,
        /// Clusters without treated units that fell back to the global rescale.
        globally_rescaled_clusters: usize,
    },
}

/// Weights on the control units; treated units implicitly carry weight 1.
#[derive(Debug, Clone, Serialize)]
pub struct WeightSolution {
    pub method: Method,
    /// Dataset positions of the controls, aligned with `gamma`.
    pub control_indices: Vec<usize>,
    pub gamma: Vec<f64>,
    pub implied_propensity: Vec<f64>,
    pub sum_gamma: f64,
    pub lambda: Option<f64>,
    pub meta: SolverMeta,
    pub warnings: Vec<String>,
}

impl WeightSolution {
    pub fn new(
        method: Method,
        control_indices: Vec<usize>,
        gamma: Vec<f64>,
        lambda: Option<f64>,
        meta: SolverMeta,
        warnings: Vec<String>,
    ) -> Self {
        let implied_propensity = gamma.iter().map(|&g| implied_propensity(g)).collect();
        let sum_gamma = gamma.iter().sum();
        WeightSolution {
            method,
            control_indices,
            gamma,
            implied_propensity,
            sum_gamma,
            lambda,
            meta,
            warnings,
        }
    }

    /// Weight per dataset unit: 1 for treated units, γ for controls.
    pub fn unit_weights(&self, ds: &Dataset) -> Vec<f64> {
        let mut w: Vec<f64> = ds
            .units()
            .iter()
            .map(|u| if u.treated { 1.0 } else { 0.0 })
            .collect();
        for (&i, &g) in self.control_indices.iter().zip(&self.gamma) {
            w[i] = g;
        }
        w
    }

    /// Weight per control unit in dataset order, indexed by dataset position.
    pub fn control_weights(&self, ds: &Dataset) -> Vec<Option<f64>> {
        let mut w = vec![None; ds.n()];
        for (&i, &g) in self.control_indices.iter().zip(&self.gamma) {
            w[i] = Some(g);
        }
        w
    }
}

/// e = γ / (1 + γ).
pub fn implied_propensity(gamma: f64) -> f64 {
    if gamma.is_infinite() {
        return 1.0;
    }
    gamma / (1.0 + gamma)
}

/// Ridge hyperparameter setting. Serialized as the string `"auto"` or a
/// nonnegative number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda {
    /// Residual variance of the control-arm regression of Y on the features.
    Auto,
    Fixed(f64),
}

impl Serialize for Lambda {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Lambda::Auto => s.serialize_str("auto"),
            Lambda::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Lambda {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = Lambda;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("\"auto\" or a nonnegative number")
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<Lambda, E> {
                if v == "auto" {
                    Ok(Lambda::Auto)
                } else {
                    Err(E::invalid_value(serde::de::Unexpected::Str(v), &self))
                }
            }

            fn visit_f64<E: serde::de::Error>(self, v: f64) -> std::result::Result<Lambda, E> {
                if v >= 0.0 && v.is_finite() {
                    Ok(Lambda::Fixed(v))
                } else {
                    Err(E::invalid_value(serde::de::Unexpected::Float(v), &self))
                }
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<Lambda, E> {
                Ok(Lambda::Fixed(v as f64))
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<Lambda, E> {
                self.visit_f64(v as f64)
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceOptions {
    pub lambda: Lambda,
    pub solver: SolverOptions,
    /// Convert infeasible equality constraints into heavy penalty blocks.
    pub penalty_fallback: bool,
}

impl Default for BalanceOptions {
    fn default() -> Self {
        BalanceOptions {
            lambda: Lambda::Auto,
            solver: SolverOptions::default(),
            penalty_fallback: false,
        }
    }
}

/// Data-driven ridge hyperparameter: residual variance from regressing the
/// outcome on the unit features among controls.
pub fn select_lambda(ds: &Dataset, features: &FeatureSet) -> Result<f64> {
    let fit = fit_outcome_model(ds, features, OutcomeAssumption::XOnly)?;
    let v = fit.residual_variance;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Ok(1.0)
    }
}

fn resolve_lambda(ds: &Dataset, features: &FeatureSet, lambda: Lambda) -> Result<f64> {
    match lambda {
        Lambda::Auto => select_lambda(ds, features),
        Lambda::Fixed(l) if l.is_finite() && l >= 0.0 => Ok(l),
        Lambda::Fixed(l) => Err(Error::InvalidInput(format!(
            "lambda must be finite and ≥ 0, got {l}"
        ))),
    }
}

fn check_features(ds: &Dataset, features: &FeatureSet) -> Result<()> {
    if features.phi.matrix.nrows() != ds.n()
        || features.psi.matrix.nrows() != ds.n()
        || features.s_bar.matrix.nrows() != ds.cluster_count()
    {
        return Err(Error::Dimension(
            "feature set was built from a different dataset".into(),
        ));
    }
    Ok(())
}

/// Rows `(1/n1) Σ_{controls} γ_j x_j = (1/n1) Σ_{treated} x_i` for every
/// column of `x` (n × c).
fn mean_balance_rows(
    ds: &Dataset,
    controls: &[usize],
    x: &DMatrix<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let n1 = ds.n1() as f64;
    let c = x.ncols();
    let a = DMatrix::from_fn(c, controls.len(), |k, j| x[(controls[j], k)] / n1);
    let mut b = DVector::zeros(c);
    for i in ds.treated_indices() {
        for k in 0..c {
            b[k] += x[(i, k)] / n1;
        }
    }
    (a, b)
}

fn sum_row(ds: &Dataset, n0: usize) -> (DMatrix<f64>, DVector<f64>) {
    let n1 = ds.n1() as f64;
    (
        DMatrix::from_element(1, n0, 1.0 / n1),
        DVector::from_element(1, 1.0),
    )
}

/// Per-cluster rows `(1/n1g) Σ_{g, controls} γ_j = 1`.
fn average_to_one_rows(ds: &Dataset, controls: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let k = ds.cluster_count();
    let mut a = DMatrix::zeros(k, controls.len());
    for (j, &i) in controls.iter().enumerate() {
        let g = ds.cluster_of(i);
        a[(g, j)] = 1.0 / ds.clusters()[g].n_treated as f64;
    }
    (a, DVector::from_element(k, 1.0))
}

fn require_nondegenerate(ds: &Dataset) -> Result<()> {
    let count = ds.degenerate_cluster_count();
    if count > 0 {
        return Err(Error::DegenerateClusters { count });
    }
    Ok(())
}

/// Ridge on the weights subject to exact global balance of φ and Σγ = n1.
pub fn standard_problem(ds: &Dataset, features: &FeatureSet, lambda: f64) -> Result<QpProblem> {
    check_features(ds, features)?;
    let controls = ds.control_indices();
    let n0 = controls.len();
    let n1 = ds.n1() as f64;
    let mut p = QpProblem::new(n0);
    p.ridge = DVector::from_element(n0, lambda / (n1 * n1));
    let (a, b) = mean_balance_rows(ds, &controls, &features.phi.matrix);
    p.add_equalities(&a, &b);
    let (a, b) = sum_row(ds, n0);
    p.add_equalities(&a, &b);
    Ok(p)
}

/// Per-cluster local imbalance with per-cluster ridge, exact global balance
/// of φ, and average-to-one weights within each cluster.
pub fn hierarchical_problem(ds: &Dataset, features: &FeatureSet, lambda: f64) -> Result<QpProblem> {
    check_features(ds, features)?;
    require_nondegenerate(ds)?;
    let controls = ds.control_indices();
    let n0 = controls.len();
    let phi = &features.phi.matrix;
    let d = phi.ncols();
    let mut var_of = vec![usize::MAX; ds.n()];
    for (j, &i) in controls.iter().enumerate() {
        var_of[i] = j;
    }
    let mut p = QpProblem::new(n0);
    for c in ds.clusters() {
        let n1g = c.n_treated as f64;
        let support: Vec<usize> = c
            .members
            .iter()
            .filter(|&&i| !ds.unit(i).treated)
            .map(|&i| var_of[i])
            .collect();
        let design = DMatrix::from_fn(d, support.len(), |k, s| {
            phi[(controls[support[s]], k)] / n1g
        });
        let mut target = DVector::zeros(d);
        for &i in c.members.iter().filter(|&&i| ds.unit(i).treated) {
            for k in 0..d {
                target[k] += phi[(i, k)] / n1g;
            }
        }
        for &v in &support {
            p.ridge[v] = lambda / (n1g * n1g);
        }
        if d > 0 {
            p.blocks
                .push(ObjectiveBlock::local(design, target, 1.0, support));
        }
    }
    let (a, b) = mean_balance_rows(ds, &controls, phi);
    p.add_equalities(&a, &b);
    let (a, b) = average_to_one_rows(ds, &controls);
    p.add_equalities(&a, &b);
    Ok(p)
}

/// Pooled ψ imbalance with ridge λ/n1², exact balance of φ and Σγ = n1, plus
/// either exact S̄ balance (GB) or per-cluster average-to-one (AvTO).
pub fn mundlak_problem(
    ds: &Dataset,
    features: &FeatureSet,
    lambda: f64,
    variant: MundlakVariant,
) -> Result<QpProblem> {
    check_features(ds, features)?;
    if variant == MundlakVariant::AverageToOne {
        require_nondegenerate(ds)?;
    }
    let controls = ds.control_indices();
    let n0 = controls.len();
    let n1 = ds.n1() as f64;
    let mut p = QpProblem::new(n0);
    p.ridge = DVector::from_element(n0, lambda / (n1 * n1));
    let psi = &features.psi.matrix;
    if psi.ncols() > 0 {
        let (design, target) = mean_balance_rows(ds, &controls, psi);
        p.blocks.push(ObjectiveBlock::dense(design, target, 1.0));
    }
    let (a, b) = mean_balance_rows(ds, &controls, &features.phi.matrix);
    p.add_equalities(&a, &b);
    let (a, b) = sum_row(ds, n0);
    p.add_equalities(&a, &b);
    match variant {
        MundlakVariant::GlobalBalance => {
            let s_units = broadcast_to_units(ds, &features.s_bar.matrix);
            let (a, b) = mean_balance_rows(ds, &controls, &s_units);
            p.add_equalities(&a, &b);
        }
        MundlakVariant::AverageToOne => {
            let (a, b) = average_to_one_rows(ds, &controls);
            p.add_equalities(&a, &b);
        }
    }
    Ok(p)
}

fn penalized(p: &QpProblem) -> QpProblem {
    let mut soft = p.clone();
    if p.eq_count() > 0 {
        soft.blocks.push(ObjectiveBlock::dense(
            p.eq_matrix.clone(),
            p.eq_rhs.clone(),
            PENALTY_WEIGHT,
        ));
    }
    soft.eq_matrix = DMatrix::zeros(0, p.var_count);
    soft.eq_rhs = DVector::zeros(0);
    soft
}

fn qp_meta(s: &QpSolution, penalty_fallback: bool) -> SolverMeta {
    SolverMeta::Qp {
        status: s.status,
        primal_residual: s.primal_residual,
        kkt_residual: s.kkt_residual,
        objective_value: s.objective_value,
        iterations: s.iterations,
        penalty_fallback,
    }
}

/// Solves a balancing problem, applying the penalty fallback when enabled.
pub fn solve_balancing(
    ds: &Dataset,
    method: Method,
    problem: &QpProblem,
    lambda: f64,
    opts: &BalanceOptions,
) -> Result<WeightSolution> {
    let controls = ds.control_indices();
    let sol = qp::solve(problem, &opts.solver)?;
    let mut warnings = Vec::new();
    match sol.status {
        QpStatus::Infeasible => {
            if !opts.penalty_fallback {
                let x = DVector::from_column_slice(&sol.gamma);
                let violations: Vec<f64> = (&problem.eq_matrix * x - &problem.eq_rhs)
                    .iter()
                    .copied()
                    .collect();
                return Err(Error::Infeasible {
                    residual: sol.infeasibility_residual.unwrap_or(f64::NAN),
                    violations,
                });
            }
            let soft = qp::solve(&penalized(problem), &opts.solver)?;
            warnings.push(format!(
                "exact balance infeasible (residual {:.3e}); equality constraints converted to penalties with weight {PENALTY_WEIGHT:e}",
                sol.infeasibility_residual.unwrap_or(f64::NAN)
            ));
            if soft.status != QpStatus::Optimal {
                warnings.push(format!(
                    "penalized solve ended with status {:?}",
                    soft.status
                ));
            }
            let meta = qp_meta(&soft, true);
            Ok(WeightSolution::new(
                method,
                controls,
                soft.gamma,
                Some(lambda),
                meta,
                warnings,
            ))
        }
        status => {
            if status != QpStatus::Optimal {
                warnings.push(format!(
                    "solver stopped with status {status:?} (equality residual {:.3e})",
                    sol.primal_residual
                ));
            }
            let meta = qp_meta(&sol, false);
            Ok(WeightSolution::new(
                method,
                controls,
                sol.gamma,
                Some(lambda),
                meta,
                warnings,
            ))
        }
    }
}

pub fn standard_balancing_weights(
    ds: &Dataset,
    features: &FeatureSet,
    opts: &BalanceOptions,
) -> Result<WeightSolution> {
    let lambda = resolve_lambda(ds, features, opts.lambda)?;
    let p = standard_problem(ds, features, lambda)?;
    solve_balancing(ds, Method::StandardBw, &p, lambda, opts)
}

pub fn hierarchical_balancing_weights(
    ds: &Dataset,
    features: &FeatureSet,
    opts: &BalanceOptions,
) -> Result<WeightSolution> {
    let lambda = resolve_lambda(ds, features, opts.lambda)?;
    let p = hierarchical_problem(ds, features, lambda)?;
    solve_balancing(ds, Method::HierarchicalBw, &p, lambda, opts)
}

pub fn mundlak_weights(
    ds: &Dataset,
    features: &FeatureSet,
    variant: MundlakVariant,
    opts: &BalanceOptions,
) -> Result<WeightSolution> {
    let lambda = resolve_lambda(ds, features, opts.lambda)?;
    let p = mundlak_problem(ds, features, lambda, variant)?;
    let method = match variant {
        MundlakVariant::GlobalBalance => Method::MundlakGb,
        MundlakVariant::AverageToOne => Method::MundlakAvto,
    };
    solve_balancing(ds, method, &p, lambda, opts)
}

/// Per-method options for [`estimate_weights`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EstimatorOptions {
    pub balance: BalanceOptions,
    pub ri_ipw: RiIpwOptions,
}

/// Dispatches to the estimator for `method`.
pub fn estimate_weights(
    ds: &Dataset,
    features: &FeatureSet,
    method: Method,
    opts: &EstimatorOptions,
) -> Result<WeightSolution> {
    match method {
        Method::StandardBw => standard_balancing_weights(ds, features, &opts.balance),
        Method::RiIpw => ri_ipw_weights(ds, features, &opts.ri_ipw),
        Method::HierarchicalBw => hierarchical_balancing_weights(ds, features, &opts.balance),
        Method::MundlakGb => {
            mundlak_weights(ds, features, MundlakVariant::GlobalBalance, &opts.balance)
        }
        Method::MundlakAvto => {
            mundlak_weights(ds, features, MundlakVariant::AverageToOne, &opts.balance)
        }
    }
}

/// (1/n1) Σ γ x over controls minus the treated mean, per column of `x`.
pub fn global_imbalance(ds: &Dataset, ws: &WeightSolution, x: &DMatrix<f64>) -> DVector<f64> {
    let n1 = ds.n1() as f64;
    let mut v = DVector::zeros(x.ncols());
    for (&i, &g) in ws.control_indices.iter().zip(&ws.gamma) {
        for k in 0..x.ncols() {
            v[k] += g * x[(i, k)] / n1;
        }
    }
    for i in ds.treated_indices() {
        for k in 0..x.ncols() {
            v[k] -= x[(i, k)] / n1;
        }
    }
    v
}

/// Within-cluster analogue of [`global_imbalance`] normalized by n1g;
/// `None` for clusters without treated units.
pub fn local_imbalance(
    ds: &Dataset,
    ws: &WeightSolution,
    x: &DMatrix<f64>,
    cluster: usize,
) -> Option<DVector<f64>> {
    let c = &ds.clusters()[cluster];
    if c.n_treated == 0 {
        return None;
    }
    let n1g = c.n_treated as f64;
    let weights = ws.control_weights(ds);
    let mut v = DVector::zeros(x.ncols());
    for &i in &c.members {
        let w = if ds.unit(i).treated {
            -1.0
        } else {
            weights[i].unwrap_or(0.0)
        };
        for k in 0..x.ncols() {
            v[k] += w * x[(i, k)] / n1g;
        }
    }
    Some(v)
}

/// Coefficient bounds of the linear outcome-model class used to report a
/// worst-case bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceModelClass {
    pub global_bound: f64,
    pub local_bound: f64,
}

impl Default for BalanceModelClass {
    fn default() -> Self {
        BalanceModelClass {
            global_bound: 1.0,
            local_bound: 1.0,
        }
    }
}

/// B‖global imbalance‖₂ + Σ_g (n1g/n1) D ‖local imbalance(g)‖₂ over φ.
pub fn worst_case_bias_bound(
    ds: &Dataset,
    features: &FeatureSet,
    ws: &WeightSolution,
    mc: &BalanceModelClass,
) -> f64 {
    let phi = &features.phi.matrix;
    let n1 = ds.n1() as f64;
    let global = mc.global_bound * global_imbalance(ds, ws, phi).norm();
    let local: f64 = (0..ds.cluster_count())
        .filter_map(|g| {
            local_imbalance(ds, ws, phi, g)
                .map(|v| ds.clusters()[g].n_treated as f64 / n1 * mc.local_bound * v.norm())
        })
        .sum();
    global + local
}

/// Largest violation of the equality constraints the method declares,
/// evaluated directly from the weights.
pub fn declared_constraint_residual(
    ds: &Dataset,
    features: &FeatureSet,
    ws: &WeightSolution,
) -> f64 {
    let n1 = ds.n1() as f64;
    let phi_res = || global_imbalance(ds, ws, &features.phi.matrix).amax();
    let sum_res = || (ws.sum_gamma / n1 - 1.0).abs();
    let avto_res = |skip_missing: bool| {
        let mut worst = 0.0_f64;
        for (g, c) in ds.clusters().iter().enumerate() {
            if c.n_treated == 0 || (skip_missing && c.n_control == 0) {
                continue;
            }
            let s: f64 = ws
                .control_indices
                .iter()
                .zip(&ws.gamma)
                .filter(|(&i, _)| ds.cluster_of(i) == g)
                .map(|(_, &w)| w)
                .sum();
            worst = worst.max((s / c.n_treated as f64 - 1.0).abs());
        }
        worst
    };
    match ws.method {
        Method::StandardBw => phi_res().max(sum_res()),
        Method::HierarchicalBw => phi_res().max(avto_res(false)),
        Method::MundlakGb => {
            let s_units = broadcast_to_units(ds, &features.s_bar.matrix);
            phi_res()
                .max(sum_res())
                .max(global_imbalance(ds, ws, &s_units).amax())
        }
        Method::MundlakAvto => phi_res().max(sum_res()).max(avto_res(false)),
        Method::RiIpw => match ws.meta {
            SolverMeta::Logistic {
                standardized_within_cluster: true,
                ..
            } => avto_res(true),
            _ => 0.0,
        },
    }
}

#[cfg(test)]
mod tests;
