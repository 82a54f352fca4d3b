use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{QpProblem, QpSolution};

/// KKT residuals of a candidate point, with multipliers recomputed from
/// the problem data alone.
#[derive(Debug, Clone, Serialize)]
pub struct KktReport {
    /// ‖∇f + Aᵀν − μ‖∞ split as: |μ_i| on free coordinates and max(0, −μ_i)
    /// on coordinates at zero.
    pub stationarity: f64,
    /// `stationarity` divided by the problem's gradient scale.
    pub stationarity_rel: f64,
    pub primal_residual: f64,
    pub nonneg_violation: f64,
    pub complementarity: f64,
    pub eq_multipliers: Vec<f64>,
    pub bound_multipliers: Vec<f64>,
}

/// Evaluates stationarity, feasibility and complementary slackness of
/// `s.gamma` for `p`. Nothing from the solver's internal state is used: the
/// equality multipliers are the least-squares fit of the gradient on the
/// free coordinates.
pub fn check_kkt(p: &QpProblem, s: &QpSolution) -> KktReport {
    kkt_at(p, &s.gamma)
}

pub(crate) fn kkt_at(p: &QpProblem, gamma: &[f64]) -> KktReport {
    let n = p.var_count;
    let k = p.eq_count();
    let grad = p.gradient(gamma);
    let g_max = gamma.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let free: Vec<bool> = gamma
        .iter()
        .map(|&v| !p.nonneg || v > 1e-12 * g_max.max(1.0))
        .collect();
    let free_idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();

    let mut nu = DVector::zeros(k);
    if k > 0 {
        let norms: Vec<f64> = (0..k)
            .map(|r| p.eq_matrix.row(r).norm().max(1e-300))
            .collect();
        let a_f = DMatrix::from_fn(k, free_idx.len(), |r, c| {
            p.eq_matrix[(r, free_idx[c])] / norms[r]
        });
        let g_f = DVector::from_iterator(free_idx.len(), free_idx.iter().map(|&i| grad[i]));
        let normal = &a_f * a_f.transpose();
        let rhs = -(&a_f * g_f);
        let svd = normal.svd(true, true);
        let tol = 1e-12 * svd.singular_values.max().max(1.0);
        let mut nu_n = svd.solve(&rhs, tol).unwrap_or_else(|_| DVector::zeros(k));
        // Directions of ν left undetermined by the free coordinates are
        // chosen to make the bound multipliers as nonnegative as possible.
        let v_t = svd.v_t.as_ref().expect("requested");
        let null: Vec<usize> = (0..k).filter(|&i| svd.singular_values[i] <= tol).collect();
        let bound: Vec<usize> = (0..n).filter(|&i| !free[i]).collect();
        if !null.is_empty() && !bound.is_empty() {
            let basis = DMatrix::from_fn(k, null.len(), |r, c| v_t[(null[c], r)] / norms[r]);
            let mut scaled = nu_n.clone();
            for r in 0..k {
                scaled[r] /= norms[r];
            }
            let base = &grad + p.eq_matrix.tr_mul(&scaled);
            let c = DVector::from_iterator(bound.len(), bound.iter().map(|&i| base[i]));
            let m = DMatrix::from_fn(bound.len(), null.len(), |b, j| {
                (0..k)
                    .map(|r| p.eq_matrix[(r, bound[b])] * basis[(r, j)])
                    .sum::<f64>()
            });
            let z = minimize_negative_part(&c, &m);
            for j in 0..null.len() {
                for r in 0..k {
                    nu_n[r] += v_t[(null[j], r)] * z[j];
                }
            }
        }
        for r in 0..k {
            nu[r] = nu_n[r] / norms[r];
        }
    }
    let mu = if k > 0 {
        &grad + p.eq_matrix.tr_mul(&nu)
    } else {
        grad.clone()
    };

    let mut stationarity = 0.0_f64;
    let mut complementarity = 0.0_f64;
    for i in 0..n {
        let r = if free[i] {
            mu[i].abs()
        } else {
            (-mu[i]).max(0.0)
        };
        stationarity = stationarity.max(r);
        complementarity = complementarity.max((mu[i] * gamma[i]).abs());
    }
    let grad0 = p.gradient(&vec![0.0; n]);
    let scale = grad
        .amax()
        .max(grad0.amax())
        .max(if k > 0 {
            p.eq_matrix.tr_mul(&nu).amax()
        } else {
            0.0
        })
        .max(1e-300);
    let nonneg_violation = if p.nonneg {
        gamma.iter().fold(0.0_f64, |m, &v| m.max(-v))
    } else {
        0.0
    };

    KktReport {
        stationarity,
        stationarity_rel: stationarity / scale,
        primal_residual: p.eq_residual(gamma),
        nonneg_violation,
        complementarity,
        eq_multipliers: nu.iter().copied().collect(),
        bound_multipliers: mu.iter().copied().collect(),
    }
}

/// Minimizes ‖min(0, c + M z)‖² over z by semismooth Newton steps with
/// backtracking.
fn minimize_negative_part(c: &DVector<f64>, m: &DMatrix<f64>) -> DVector<f64> {
    let q = m.ncols();
    let value = |z: &DVector<f64>| -> f64 { (c + m * z).iter().map(|v| v.min(0.0).powi(2)).sum() };
    let mut z = DVector::zeros(q);
    let mut f = value(&z);
    for _ in 0..100 {
        if f == 0.0 {
            break;
        }
        let r = c + m * &z;
        let active: Vec<usize> = (0..r.len()).filter(|&i| r[i] < 0.0).collect();
        let m_s = DMatrix::from_fn(active.len(), q, |a, j| m[(active[a], j)]);
        let c_s = DVector::from_iterator(active.len(), active.iter().map(|&i| c[i]));
        let Ok(target) = m_s.svd(true, true).solve(&(-c_s), 1e-12) else {
            break;
        };
        let step = target - &z;
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand = &z + &step * t;
            let fc = value(&cand);
            if fc < f {
                z = cand;
                improved = f - fc > 1e-15 * f;
                f = fc;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    z
}
