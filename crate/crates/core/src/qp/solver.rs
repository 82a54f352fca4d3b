use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use super::structure::{KktFactor, Structure};
use super::{check_kkt, ObjectiveBlock, QpProblem, QpSolution, QpStatus, SolverOptions};
use crate::error::Result;

const RELAXATION: f64 = 1.6;
const MAX_REFACTORS: usize = 40;
const MAX_POLISH_ROUNDS: usize = 60;
/// Normalized least-squares residual above which the equality system is
/// declared infeasible over the nonnegative orthant.
const INFEASIBLE_RESIDUAL: f64 = 1e-6;

/// Equality rows after normalization and removal of redundant rows.
struct EqSystem {
    a: DMatrix<f64>,
    b: DVector<f64>,
    /// (original row, original row norm) for each kept row.
    rows: Vec<(usize, f64)>,
}

enum Reduced {
    Ok(EqSystem),
    Inconsistent,
}

fn reduce_equalities(p: &QpProblem) -> Reduced {
    let n = p.var_count;
    let mut basis: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut kept: Vec<(usize, f64)> = Vec::new();
    for i in 0..p.eq_count() {
        let row = p.eq_matrix.row(i).transpose();
        let norm = row.norm();
        let bi = p.eq_rhs[i];
        if norm <= 1e-300 {
            if bi.abs() > 1e-12 {
                return Reduced::Inconsistent;
            }
            continue;
        }
        let mut v = row / norm;
        let mut vb = bi / norm;
        for _ in 0..2 {
            for (qv, qb) in &basis {
                let c = v.dot(qv);
                v.axpy(-c, qv, 1.0);
                vb -= c * qb;
            }
        }
        let rn = v.norm();
        if rn < 1e-9 {
            if vb.abs() > 1e-9 * (1.0 + (bi / norm).abs()) {
                return Reduced::Inconsistent;
            }
            continue;
        }
        basis.push((v / rn, vb / rn));
        kept.push((i, norm));
    }
    let k = kept.len();
    let a = DMatrix::from_fn(k, n, |r, c| p.eq_matrix[(kept[r].0, c)] / kept[r].1);
    let b = DVector::from_fn(k, |r, _| p.eq_rhs[kept[r].0] / kept[r].1);
    Reduced::Ok(EqSystem { a, b, rows: kept })
}

fn objective_scale(p: &QpProblem) -> f64 {
    let n = p.var_count.max(1);
    let mut total: f64 = p.ridge.iter().map(|r| 2.0 * r).sum();
    for b in &p.blocks {
        total += 2.0 * b.weight * b.design.iter().map(|v| v * v).sum::<f64>();
    }
    let mean = total / n as f64;
    if mean > 0.0 && mean.is_finite() {
        1.0 / mean
    } else {
        1.0
    }
}

/// Solves the problem; see the module docs for the method.
///
/// Errors only on malformed input. Infeasible equality systems are reported
/// through [`QpStatus::Infeasible`].
pub fn solve(p: &QpProblem, opts: &SolverOptions) -> Result<QpSolution> {
    p.validate()?;
    let n = p.var_count;
    let scale = objective_scale(p);
    let eq = match reduce_equalities(p) {
        Reduced::Ok(eq) => eq,
        Reduced::Inconsistent => return Ok(infeasible(p, opts, 0)),
    };
    let (st, q) = Structure::from_problem(p, scale);

    if n == 0 {
        return Ok(finish(
            p,
            opts,
            vec![],
            &eq,
            &DVector::zeros(eq.b.len()),
            scale,
            0,
            true,
        ));
    }

    let all: Vec<usize> = (0..n).collect();
    if !p.nonneg {
        if let Some((x, nu)) = polish(&st, &q, &eq, vec![true; n], false) {
            return Ok(finish(
                p,
                opts,
                x.as_slice().to_vec(),
                &eq,
                &nu,
                scale,
                0,
                true,
            ));
        }
    }

    let mut rho = 1.0;
    let mut kkt = match factor_all(&st, &all, rho, &eq) {
        Some(k) => k,
        None => return Ok(infeasible(p, opts, 0)),
    };
    let mut z = DVector::zeros(n);
    let mut u = DVector::zeros(n);
    let mut x = DVector::zeros(n);
    let mut eps = 1e-3;
    let mut refactors = 0;
    let mut polish_attempts = 0;
    let mut last_polish_set: Option<Vec<bool>> = None;
    let mut stall_ref = f64::INFINITY;
    let mut phase_one_done = false;
    let neg_q = -&q;

    for it in 1..=opts.max_iter {
        let rhs = &neg_q + (&z - &u) * rho;
        let (xn, _) = kkt.solve(&rhs, &eq.b);
        x = xn;
        let xh = &x * RELAXATION + &z * (1.0 - RELAXATION);
        let z_prev = z.clone();
        z = (&xh + &u).map(|v| v.max(0.0));
        u += &xh - &z;

        if it % 5 != 0 {
            continue;
        }
        let r_p = (&x - &z).amax();
        let r_d = rho * (&z - &z_prev).amax();
        let eps_p = eps * (1.0 + x.amax().max(z.amax()));
        let eps_d = eps * (1.0 + (rho * u.amax()).max(q.amax()));

        let converged = r_p <= eps_p && r_d <= eps_d;
        let scheduled = it == 50 || it == 250;
        if (converged || scheduled) && polish_attempts < 12 {
            let guess: Vec<bool> = z
                .iter()
                .zip(x.iter())
                .map(|(&zv, &xv)| zv > 0.0 || xv > 0.0)
                .collect();
            if last_polish_set.as_ref() != Some(&guess) {
                polish_attempts += 1;
                if let Some((xp, nu)) = polish(&st, &q, &eq, guess.clone(), true) {
                    let sol = finish(p, opts, xp.as_slice().to_vec(), &eq, &nu, scale, it, true);
                    if sol.status == QpStatus::Optimal {
                        return Ok(sol);
                    }
                }
                last_polish_set = Some(guess);
            }
            if converged {
                eps = (eps * 0.1).max(1e-13);
            }
        }

        if it % 100 == 0 && refactors < MAX_REFACTORS && r_p > 0.0 && r_d > 0.0 {
            let ratio = ((r_p / eps_p) / (r_d / eps_d)).sqrt();
            if !(0.2..=5.0).contains(&ratio) {
                let new_rho = (rho * ratio).clamp(1e-6, 1e6);
                if let Some(k) = factor_all(&st, &all, new_rho, &eq) {
                    u *= rho / new_rho;
                    rho = new_rho;
                    kkt = k;
                    refactors += 1;
                }
            }
        }

        if it % 1000 == 0 && !phase_one_done {
            if r_p > eps_p && r_p > 0.9 * stall_ref {
                phase_one_done = true;
                if let Some(residual) = phase_one_residual(&eq, opts) {
                    if residual > INFEASIBLE_RESIDUAL {
                        return Ok(infeasible(p, opts, it));
                    }
                }
            }
            stall_ref = r_p;
        }
    }

    // Out of iterations: decide between infeasible and slow convergence.
    if let Some(residual) = phase_one_residual(&eq, opts) {
        if residual > INFEASIBLE_RESIDUAL {
            return Ok(infeasible(p, opts, opts.max_iter));
        }
    }
    let guess: Vec<bool> = z.iter().map(|&v| v > 0.0).collect();
    if let Some((xp, nu)) = polish(&st, &q, &eq, guess, true) {
        return Ok(finish(
            p,
            opts,
            xp.as_slice().to_vec(),
            &eq,
            &nu,
            scale,
            opts.max_iter,
            true,
        ));
    }
    let gamma: Vec<f64> = z.iter().copied().collect();
    let _ = x;
    let nu = DVector::zeros(eq.b.len());
    Ok(finish(
        p,
        opts,
        gamma,
        &eq,
        &nu,
        scale,
        opts.max_iter,
        false,
    ))
}

fn factor_all(st: &Structure, all: &[usize], shift: f64, eq: &EqSystem) -> Option<KktFactor> {
    let f = st.factor(all, shift)?;
    KktFactor::new(f, eq.a.clone())
}

/// Active-set refinement by block principal pivoting, starting from the
/// free set `free`. Returns the solution and scaled equality multipliers.
fn polish(
    st: &Structure,
    q: &DVector<f64>,
    eq: &EqSystem,
    mut free: Vec<bool>,
    nonneg: bool,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = st.n;
    let k = eq.b.len();
    let mut seen: HashSet<Vec<bool>> = HashSet::new();
    let mut best_violations = usize::MAX;
    let mut stalled = 0;
    let delta = 1e-11;

    for _ in 0..MAX_POLISH_ROUNDS {
        if !seen.insert(free.clone()) {
            return None;
        }
        let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        let (x, nu) = if idx.is_empty() {
            if eq.b.amax() > 1e-10 {
                return None;
            }
            (DVector::zeros(n), DVector::zeros(k))
        } else {
            solve_reduced(st, q, eq, &idx, delta)?
        };

        let mut mu = st.mul(&x) + q;
        if k > 0 {
            mu += eq.a.tr_mul(&nu);
        }
        if !nonneg {
            return Some((x, nu));
        }
        let tol_x = 1e-12 * x.amax().max(1.0);
        let tol_mu = 1e-10 * q.amax().max(mu.amax()).max(1.0);
        let neg_x: Vec<usize> = idx.iter().copied().filter(|&i| x[i] < -tol_x).collect();
        let neg_mu: Vec<usize> = (0..n).filter(|&i| !free[i] && mu[i] < -tol_mu).collect();
        let violations = neg_x.len() + neg_mu.len();
        if violations == 0 {
            let x = x.map(|v| v.max(0.0));
            return Some((x, nu));
        }
        if violations < best_violations {
            best_violations = violations;
            stalled = 0;
        } else {
            stalled += 1;
        }
        if stalled < 3 {
            for i in neg_x {
                free[i] = false;
            }
            for i in neg_mu {
                free[i] = true;
            }
        } else {
            // Single exchange on the largest violating index guarantees progress.
            let i = neg_x.iter().chain(neg_mu.iter()).copied().max().unwrap();
            free[i] = !free[i];
        }
    }
    None
}

/// Solves the equality-constrained problem on the free set `idx` with
/// iterative refinement against the unshifted system.
fn solve_reduced(
    st: &Structure,
    q: &DVector<f64>,
    eq: &EqSystem,
    idx: &[usize],
    delta: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = st.n;
    let k = eq.b.len();
    let factor = st
        .factor(idx, delta)
        .or_else(|| st.factor(idx, delta * 1e3))?;
    let a_f = DMatrix::from_fn(k, idx.len(), |r, c| eq.a[(r, idx[c])]);
    let kkt = KktFactor::new(factor, a_f.clone())?;
    let q_f = DVector::from_iterator(idx.len(), idx.iter().map(|&i| -q[i]));
    let (mut xf, mut nu) = kkt.solve(&q_f, &eq.b);

    let embed = |xf: &DVector<f64>| {
        let mut x = DVector::zeros(n);
        for (c, &i) in idx.iter().enumerate() {
            x[i] = xf[c];
        }
        x
    };
    for _ in 0..3 {
        let px = st.mul(&embed(&xf));
        let mut r1 = DVector::from_iterator(idx.len(), idx.iter().map(|&i| -q[i] - px[i]));
        if k > 0 {
            r1 -= a_f.tr_mul(&nu);
        }
        let r2 = if k > 0 {
            &eq.b - &a_f * &xf
        } else {
            DVector::zeros(0)
        };
        let (dx, dnu) = kkt.solve(&r1, &r2);
        xf += dx;
        if k > 0 {
            nu += dnu;
        }
    }
    if k > 0 {
        let res = (&a_f * &xf - &eq.b).amax();
        if !(res <= 1e-10 * (1.0 + eq.b.amax())) {
            return None;
        }
    }
    if xf.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((embed(&xf), nu))
}

/// Minimum of max |Aγ − b| over γ ≥ 0 in normalized row units.
fn phase_one_residual(eq: &EqSystem, opts: &SolverOptions) -> Option<f64> {
    let n = eq.a.ncols();
    let k = eq.a.nrows();
    if k == 0 {
        return Some(0.0);
    }
    let mut p = QpProblem::new(n);
    p.blocks
        .push(ObjectiveBlock::dense(eq.a.clone(), eq.b.clone(), 1.0));
    let mean_diag = eq.a.iter().map(|v| v * v).sum::<f64>() / n as f64;
    p.ridge = DVector::from_element(n, 1e-12 * mean_diag.max(1e-300));
    let inner = SolverOptions {
        max_iter: opts.max_iter.min(20_000),
        ..*opts
    };
    let sol = solve(&p, &inner).ok()?;
    let x = DVector::from_column_slice(&sol.gamma);
    Some((&eq.a * x - &eq.b).amax())
}

fn infeasible(p: &QpProblem, opts: &SolverOptions, iterations: usize) -> QpSolution {
    let n = p.var_count;
    // Closest nonnegative point in the least-squares sense over the raw rows.
    let mut lsq = QpProblem::new(n);
    let mut residual = None;
    let mut gamma = vec![0.0; n];
    if p.eq_count() > 0 && n > 0 {
        let norms: Vec<f64> = (0..p.eq_count())
            .map(|i| p.eq_matrix.row(i).norm().max(1e-300))
            .collect();
        let a = DMatrix::from_fn(p.eq_count(), n, |r, c| p.eq_matrix[(r, c)] / norms[r]);
        let b = DVector::from_fn(p.eq_count(), |r, _| p.eq_rhs[r] / norms[r]);
        let mean_diag = a.iter().map(|v| v * v).sum::<f64>() / n as f64;
        lsq.blocks.push(ObjectiveBlock::dense(a, b, 1.0));
        lsq.ridge = DVector::from_element(n, 1e-12 * mean_diag.max(1e-300));
        let inner = SolverOptions {
            max_iter: opts.max_iter.min(20_000),
            ..*opts
        };
        if let Ok(sol) = solve(&lsq, &inner) {
            gamma = sol.gamma;
        }
    }
    if p.eq_count() > 0 {
        residual = Some(p.eq_residual(&gamma));
    }
    QpSolution {
        objective_value: p.objective(&gamma),
        primal_residual: residual.unwrap_or(0.0),
        kkt_residual: f64::NAN,
        gamma,
        status: QpStatus::Infeasible,
        iterations,
        eq_multipliers: vec![0.0; p.eq_count()],
        polished: false,
        infeasibility_residual: residual,
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    p: &QpProblem,
    opts: &SolverOptions,
    gamma: Vec<f64>,
    eq: &EqSystem,
    nu_scaled: &DVector<f64>,
    scale: f64,
    iterations: usize,
    polished: bool,
) -> QpSolution {
    let mut eq_multipliers = vec![0.0; p.eq_count()];
    for (j, &(row, norm)) in eq.rows.iter().enumerate() {
        if j < nu_scaled.len() {
            eq_multipliers[row] = nu_scaled[j] / (scale * norm);
        }
    }
    let mut sol = QpSolution {
        objective_value: p.objective(&gamma),
        primal_residual: p.eq_residual(&gamma),
        kkt_residual: 0.0,
        gamma,
        status: QpStatus::MaxIter,
        iterations,
        eq_multipliers,
        polished,
        infeasibility_residual: None,
    };
    let report = check_kkt(p, &sol);
    sol.kkt_residual = report.stationarity_rel;
    let nonneg_ok = !p.nonneg || sol.gamma.iter().all(|&g| g >= 0.0);
    if sol.primal_residual <= opts.eq_tol && report.stationarity_rel <= opts.stat_tol && nonneg_ok {
        sol.status = QpStatus::Optimal;
    }
    sol
}
