#![allow(dead_code)]

use clusterbw::data::{Dataset, Unit};
use clusterbw::qp::QpProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Dense `P`, `q`, constant of `½xᵀPx + qᵀx + c` assembled from the blocks.
pub fn dense_quadratic(p: &QpProblem) -> (DMatrix<f64>, DVector<f64>, f64) {
    let n = p.var_count;
    let mut pm = DMatrix::zeros(n, n);
    let mut q = DVector::zeros(n);
    let mut c = 0.0;
    for i in 0..n {
        pm[(i, i)] += 2.0 * p.ridge[i];
    }
    for b in &p.blocks {
        let idx: Vec<usize> = match &b.support {
            Some(s) => s.clone(),
            None => (0..n).collect(),
        };
        let mut d = DMatrix::zeros(b.design.nrows(), n);
        for (a, &i) in idx.iter().enumerate() {
            d.set_column(i, &b.design.column(a));
        }
        pm += d.transpose() * &d * (2.0 * b.weight);
        q -= d.transpose() * &b.target * (2.0 * b.weight);
        c += b.weight * b.target.norm_squared();
    }
    (pm, q, c)
}

pub struct OracleSolution {
    pub gamma: Vec<f64>,
    pub objective: f64,
}

/// Exhaustive active-set search: for every support set F, solve the
/// equality-constrained KKT system on F by pseudo-inverse and keep the best
/// feasible point. `None` means no support admits a feasible point.
pub fn enumerate(p: &QpProblem) -> Option<OracleSolution> {
    let n = p.var_count;
    assert!(n <= 16, "oracle is exponential in n");
    let (pm, q, c) = dense_quadratic(p);
    let k = p.eq_count();
    let mut best: Option<OracleSolution> = None;
    for mask in 0u32..(1 << n) {
        let free: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let m = free.len();
        let mut kkt = DMatrix::zeros(m + k, m + k);
        let mut rhs = DVector::zeros(m + k);
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                kkt[(a, b)] = pm[(i, j)];
            }
            rhs[a] = -q[i];
            for r in 0..k {
                kkt[(a, m + r)] = p.eq_matrix[(r, i)];
                kkt[(m + r, a)] = p.eq_matrix[(r, i)];
            }
        }
        for r in 0..k {
            rhs[m + r] = p.eq_rhs[r];
        }
        let sol = if m + k == 0 {
            DVector::zeros(0)
        } else {
            let Ok(pinv) = kkt.pseudo_inverse(1e-12) else {
                continue;
            };
            pinv * rhs
        };
        let mut x = vec![0.0; n];
        for (a, &i) in free.iter().enumerate() {
            x[i] = sol[a];
        }
        if x.iter().any(|&v| v < -1e-10) {
            continue;
        }
        let xv = DVector::from_column_slice(&x);
        if k > 0 && (&p.eq_matrix * &xv - &p.eq_rhs).amax() > 1e-9 {
            continue;
        }
        let x: Vec<f64> = x.into_iter().map(|v| v.max(0.0)).collect();
        let xv = DVector::from_column_slice(&x);
        let obj = 0.5 * xv.dot(&(&pm * &xv)) + q.dot(&xv) + c;
        if best
            .as_ref()
            .is_none_or(|b| obj < b.objective - 1e-14 * b.objective.abs().max(1.0))
        {
            best = Some(OracleSolution {
                gamma: x,
                objective: obj,
            });
        }
    }
    best
}

pub fn unit(id: usize, cluster: &str, treated: bool, y: f64, x: &[f64]) -> Unit {
    Unit {
        unit_id: format!("u{id}"),
        cluster_id: cluster.to_string(),
        treated,
        outcome: y,
        covariates: x.to_vec(),
    }
}

/// Random clustered dataset with treated units shifted by 0.2 and a random
/// cluster-level shift.
pub fn random_dataset<R: Rng>(
    rng: &mut R,
    clusters: usize,
    treated_per_cluster: std::ops::RangeInclusive<usize>,
    controls_per_cluster: std::ops::RangeInclusive<usize>,
    covariates: usize,
) -> Dataset {
    let mut units = Vec::new();
    let mut id = 0;
    for g in 0..clusters {
        let shift: f64 = rng.random_range(-0.5..0.5);
        let nt = rng.random_range(treated_per_cluster.clone());
        let nc = rng.random_range(controls_per_cluster.clone());
        for k in 0..nt + nc {
            let treated = k < nt;
            let x: Vec<f64> = (0..covariates)
                .map(|_| rng.random_range(-1.0..1.0) + shift + if treated { 0.2 } else { 0.0 })
                .collect();
            let y = x.iter().sum::<f64>() + rng.random_range(-1.0..1.0);
            units.push(unit(id, &format!("c{g}"), treated, y, &x));
            id += 1;
        }
    }
    let names = (0..covariates).map(|j| format!("x{j}")).collect();
    Dataset::new(units, names).expect("valid random dataset")
}

pub fn assert_close(a: f64, b: f64, rel: f64, what: &str) {
    let scale = a.abs().max(b.abs()).max(1e-300);
    assert!(
        (a - b).abs() <= rel * scale || (a - b).abs() <= 1e-300,
        "{what}: {a} vs {b} (relative difference {})",
        (a - b).abs() / scale
    );
}
