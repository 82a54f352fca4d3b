//! Random-intercept logistic propensity model and the resulting IPW odds
//! weights.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::{Method, SolverMeta, WeightSolution};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::features::FeatureSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiIpwOptions {
    pub standardize_within_cluster: bool,
    pub max_outer_iter: usize,
    /// Stop when |σ²_new − σ²| falls below this.
    pub outer_tol: f64,
    pub max_newton_iter: usize,
    pub initial_sigma2: f64,
}

impl Default for RiIpwOptions {
    fn default() -> Self {
        RiIpwOptions {
            standardize_within_cluster: true,
            max_outer_iter: 50,
            outer_tol: 1e-6,
            max_newton_iter: 100,
            initial_sigma2: 1.0,
        }
    }
}

/// Fitted model `logit e = β0 + θ·φ + α_g`.
#[derive(Debug, Clone)]
pub struct RiLogitFit {
    pub intercept: f64,
    pub theta: Vec<f64>,
    /// Per-cluster intercepts in dataset cluster order.
    pub alpha: Vec<f64>,
    pub sigma2: f64,
    /// Fitted propensity for every unit.
    pub propensity: Vec<f64>,
    pub converged: bool,
    pub outer_iterations: usize,
}

const SIGMA2_FLOOR: f64 = 1e-10;
const DIVERGENCE_BOUND: f64 = 1e3;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

struct Problem<'a> {
    /// n × (1 + d) with a leading intercept column.
    x: DMatrix<f64>,
    z: Vec<f64>,
    cluster: &'a [usize],
    k: usize,
}

struct Newton {
    beta: DVector<f64>,
    alpha: DVector<f64>,
    /// Posterior variances of α_g from the inverse Hessian diagonal.
    alpha_var: DVector<f64>,
}

impl Problem<'_> {
    fn eta(&self, beta: &DVector<f64>, alpha: &DVector<f64>) -> DVector<f64> {
        let mut eta = &self.x * beta;
        for (i, e) in eta.iter_mut().enumerate() {
            *e += alpha[self.cluster[i]];
        }
        eta
    }

    fn loss(&self, beta: &DVector<f64>, alpha: &DVector<f64>, sigma2: f64) -> f64 {
        let eta = self.eta(beta, alpha);
        let nll: f64 = eta
            .iter()
            .zip(&self.z)
            .map(|(&e, &z)| softplus(e) - z * e)
            .sum();
        nll + alpha.norm_squared() / (2.0 * sigma2)
    }

    /// Minimizes the penalized negative log-likelihood for fixed σ².
    fn fit(
        &self,
        beta: DVector<f64>,
        alpha: DVector<f64>,
        sigma2: f64,
        max_iter: usize,
    ) -> Result<Newton> {
        let p = self.x.ncols();
        let k = self.k;
        let (mut beta, mut alpha) = (beta, alpha);
        let mut loss = self.loss(&beta, &alpha, sigma2);
        for _ in 0..max_iter {
            let eta = self.eta(&beta, &alpha);
            let mut g_b = DVector::zeros(p);
            let mut g_a = DVector::from_iterator(k, alpha.iter().map(|a| a / sigma2));
            let mut h_bb = DMatrix::zeros(p, p);
            let mut h_ba = DMatrix::zeros(p, k);
            let mut d_a = DVector::from_element(k, 1.0 / sigma2);
            for i in 0..self.z.len() {
                let pr = sigmoid(eta[i]);
                let w = pr * (1.0 - pr);
                let r = pr - self.z[i];
                let g = self.cluster[i];
                let xi = self.x.row(i);
                for a in 0..p {
                    g_b[a] += r * xi[a];
                    h_ba[(a, g)] += w * xi[a];
                    for b in 0..=a {
                        h_bb[(a, b)] += w * xi[a] * xi[b];
                    }
                }
                g_a[g] += r;
                d_a[g] += w;
            }
            for a in 0..p {
                for b in 0..a {
                    h_bb[(b, a)] = h_bb[(a, b)];
                }
            }
            let (schur, hd) = schur_complement(&h_bb, &h_ba, &d_a)?;
            let rhs = &g_b - &hd * &g_a;
            let step_b = schur.solve(&rhs);
            let step_a =
                DVector::from_fn(k, |g, _| (g_a[g] - h_ba.column(g).dot(&step_b)) / d_a[g]);

            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let nb = &beta - &step_b * t;
                let na = &alpha - &step_a * t;
                let nl = self.loss(&nb, &na, sigma2);
                if nl.is_finite() && nl <= loss + 1e-12 * loss.abs().max(1.0) {
                    beta = nb;
                    alpha = na;
                    loss = nl;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if beta.amax() > DIVERGENCE_BOUND || !loss.is_finite() {
                return Err(separation());
            }
            let step = step_b.amax().max(step_a.amax()) * t;
            if !accepted || step < 1e-10 {
                break;
            }
        }
        // Posterior variances at the final point.
        let eta = self.eta(&beta, &alpha);
        let mut h_bb = DMatrix::zeros(p, p);
        let mut h_ba = DMatrix::zeros(p, k);
        let mut d_a = DVector::from_element(k, 1.0 / sigma2);
        for i in 0..self.z.len() {
            let pr = sigmoid(eta[i]);
            let w = pr * (1.0 - pr);
            let g = self.cluster[i];
            let xi = self.x.row(i);
            for a in 0..p {
                h_ba[(a, g)] += w * xi[a];
                for b in 0..p {
                    h_bb[(a, b)] += w * xi[a] * xi[b];
                }
            }
            d_a[g] += w;
        }
        let (schur, _) = schur_complement(&h_bb, &h_ba, &d_a)?;
        let alpha_var = DVector::from_fn(k, |g, _| {
            let u = h_ba.column(g) / d_a[g];
            1.0 / d_a[g] + u.dot(&schur.solve(&u))
        });
        if beta.amax() > 50.0 && self.has_saturated_fit(&beta, &alpha) {
            return Err(separation());
        }
        Ok(Newton {
            beta,
            alpha,
            alpha_var,
        })
    }

    fn has_saturated_fit(&self, beta: &DVector<f64>, alpha: &DVector<f64>) -> bool {
        self.eta(beta, alpha).iter().any(|e| e.abs() > 30.0)
    }
}

fn separation() -> Error {
    Error::Separation(
        "propensity coefficients diverge (complete separation); increase the penalty or simplify the features".into(),
    )
}

/// Returns the Cholesky factor of `H_ββ − H_βα D⁻¹ H_αβ` and `H_βα D⁻¹`.
fn schur_complement(
    h_bb: &DMatrix<f64>,
    h_ba: &DMatrix<f64>,
    d_a: &DVector<f64>,
) -> Result<(Cholesky<f64, nalgebra::Dyn>, DMatrix<f64>)> {
    let mut hd = h_ba.clone();
    for g in 0..d_a.len() {
        let inv = 1.0 / d_a[g];
        hd.column_mut(g).scale_mut(inv);
    }
    let mut s = h_bb - &hd * h_ba.transpose();
    s = (&s + s.transpose()) * 0.5;
    if let Some(c) = Cholesky::new(s.clone()) {
        return Ok((c, hd));
    }
    let tr = (s.trace().abs() / s.nrows().max(1) as f64).max(1e-300);
    for i in 0..s.nrows() {
        s[(i, i)] += 1e-10 * tr;
    }
    Cholesky::new(s)
        .map(|c| (c, hd))
        .ok_or_else(|| Error::Numerical("propensity Hessian is singular".into()))
}

/// Fits the penalized random-intercept logistic model, re-estimating σ² by
/// fixed-point iteration.
pub fn fit_random_intercept_logit(
    ds: &Dataset,
    features: &FeatureSet,
    opts: &RiIpwOptions,
) -> Result<RiLogitFit> {
    let phi = &features.phi.matrix;
    if phi.nrows() != ds.n() {
        return Err(Error::Dimension(
            "feature set was built from a different dataset".into(),
        ));
    }
    let n = ds.n();
    let d = phi.ncols();
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { phi[(i, j - 1)] });
    let z: Vec<f64> = ds
        .units()
        .iter()
        .map(|u| if u.treated { 1.0 } else { 0.0 })
        .collect();
    let cluster: Vec<usize> = (0..n).map(|i| ds.cluster_of(i)).collect();
    let k = ds.cluster_count();
    let prob = Problem {
        x,
        z,
        cluster: &cluster,
        k,
    };

    let share = ds.n1() as f64 / n as f64;
    let mut beta = DVector::zeros(d + 1);
    beta[0] = (share / (1.0 - share)).ln();
    let mut alpha = DVector::zeros(k);
    let mut sigma2 = opts.initial_sigma2.max(SIGMA2_FLOOR);
    let mut converged = false;
    let mut outer = 0;
    while outer < opts.max_outer_iter {
        outer += 1;
        let fit = prob.fit(beta, alpha, sigma2, opts.max_newton_iter)?;
        beta = fit.beta;
        alpha = fit.alpha;
        let kf = k as f64;
        let next = (alpha.norm_squared() / kf + fit.alpha_var.sum() / kf).max(SIGMA2_FLOOR);
        let change = (next - sigma2).abs();
        sigma2 = next;
        if change < opts.outer_tol {
            converged = true;
            break;
        }
    }
    // Final fit at the reported σ².
    let fit = prob.fit(beta, alpha, sigma2, opts.max_newton_iter)?;
    let eta = prob.eta(&fit.beta, &fit.alpha);
    Ok(RiLogitFit {
        intercept: fit.beta[0],
        theta: fit.beta.iter().skip(1).copied().collect(),
        alpha: fit.alpha.iter().copied().collect(),
        sigma2,
        propensity: eta.iter().map(|&e| sigmoid(e)).collect(),
        converged,
        outer_iterations: outer,
    })
}

/// Odds weights ê/(1−ê) from the random-intercept propensity model,
/// optionally rescaled to average one per treated unit within each cluster.
pub fn ri_ipw_weights(
    ds: &Dataset,
    features: &FeatureSet,
    opts: &RiIpwOptions,
) -> Result<WeightSolution> {
    let fit = fit_random_intercept_logit(ds, features, opts)?;
    let controls = ds.control_indices();
    let mut gamma: Vec<f64> = controls
        .iter()
        .map(|&i| {
            let e = fit.propensity[i];
            e / (1.0 - e)
        })
        .collect();
    let mut warnings = Vec::new();
    if !fit.converged {
        warnings.push(format!(
            "random-intercept variance did not converge within {} outer iterations",
            opts.max_outer_iter
        ));
    }
    let mut rescaled = 0;
    if opts.standardize_within_cluster {
        let total: f64 = gamma.iter().sum();
        let global = ds.n1() as f64 / total;
        let mut cluster_sum = vec![0.0; ds.cluster_count()];
        for (j, &i) in controls.iter().enumerate() {
            cluster_sum[ds.cluster_of(i)] += gamma[j];
        }
        let factors: Vec<f64> = ds
            .clusters()
            .iter()
            .zip(&cluster_sum)
            .map(|(c, &s)| {
                if c.n_treated > 0 && s > 0.0 {
                    c.n_treated as f64 / s
                } else {
                    global
                }
            })
            .collect();
        rescaled = ds
            .clusters()
            .iter()
            .filter(|c| c.n_treated == 0 && c.n_control > 0)
            .count();
        for (j, &i) in controls.iter().enumerate() {
            gamma[j] *= factors[ds.cluster_of(i)];
        }
        if rescaled > 0 {
            warnings.push(format!(
                "{rescaled} cluster(s) without treated units received the global rescale factor"
            ));
        }
    }
    let meta = SolverMeta::Logistic {
        converged: fit.converged,
        outer_iterations: fit.outer_iterations,
        sigma2: fit.sigma2,
        standardized_within_cluster: opts.standardize_within_cluster,
        globally_rescaled_clusters: rescaled,
    };
    Ok(WeightSolution::new(
        Method::RiIpw,
        controls,
        gamma,
        None,
        meta,
        warnings,
    ))
}
