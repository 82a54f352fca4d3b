//! Convex quadratic programs of the form
//!
//! ```text
//! minimize   Σ_b w_b ‖D_b γ − t_b‖² + Σ_i r_i γ_i²
//! subject to A γ = b,  γ ≥ 0
//! ```
//!
//! which covers every balancing-weight problem in the crate. The solver is
//! an alternating-direction scheme: each x-update solves the
//! equality-constrained quadratic step exactly through a cached Schur
//! factorization, nonnegativity is enforced by projection, and the result is
//! polished by active-set refinement so that equality residuals end up at
//! round-off level.

mod kkt;
mod solver;
mod structure;

use nalgebra::{DMatrix, DVector};

pub use kkt::{check_kkt, KktReport};
pub use solver::solve;

use crate::error::{Error, Result};

/// One term `weight · ‖design · γ_S − target‖²` of the objective.
#[derive(Debug, Clone)]
pub struct ObjectiveBlock {
    /// rows × |S|, where S is `support` (or all variables when `None`).
    pub design: DMatrix<f64>,
    pub target: DVector<f64>,
    pub weight: f64,
    /// Variables the block touches, in design-column order.
    pub support: Option<Vec<usize>>,
}

impl ObjectiveBlock {
    pub fn dense(design: DMatrix<f64>, target: DVector<f64>, weight: f64) -> Self {
        ObjectiveBlock {
            design,
            target,
            weight,
            support: None,
        }
    }

    pub fn local(
        design: DMatrix<f64>,
        target: DVector<f64>,
        weight: f64,
        support: Vec<usize>,
    ) -> Self {
        ObjectiveBlock {
            design,
            target,
            weight,
            support: Some(support),
        }
    }

    fn residual(&self, gamma: &[f64]) -> DVector<f64> {
        let x = match &self.support {
            Some(s) => DVector::from_iterator(s.len(), s.iter().map(|&i| gamma[i])),
            None => DVector::from_column_slice(gamma),
        };
        &self.design * x - &self.target
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub var_count: usize,
    pub blocks: Vec<ObjectiveBlock>,
    /// Per-variable coefficient on γ_i².
    pub ridge: DVector<f64>,
    /// k × var_count.
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub nonneg: bool,
}

impl QpProblem {
    pub fn new(var_count: usize) -> Self {
        QpProblem {
            var_count,
            blocks: Vec::new(),
            ridge: DVector::zeros(var_count),
            eq_matrix: DMatrix::zeros(0, var_count),
            eq_rhs: DVector::zeros(0),
            nonneg: true,
        }
    }

    /// Appends equality rows.
    pub fn add_equalities(&mut self, rows: &DMatrix<f64>, rhs: &DVector<f64>) {
        let k = self.eq_matrix.nrows();
        let extra = rows.nrows();
        let mut m = DMatrix::zeros(k + extra, self.var_count);
        m.rows_mut(0, k).copy_from(&self.eq_matrix);
        m.rows_mut(k, extra).copy_from(rows);
        let mut b = DVector::zeros(k + extra);
        b.rows_mut(0, k).copy_from(&self.eq_rhs);
        b.rows_mut(k, extra).copy_from(rhs);
        self.eq_matrix = m;
        self.eq_rhs = b;
    }

    pub fn eq_count(&self) -> usize {
        self.eq_matrix.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.var_count;
        if self.ridge.len() != n {
            return Err(Error::Dimension(format!(
                "ridge has length {}, expected {n}",
                self.ridge.len()
            )));
        }
        if self.ridge.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidInput(
                "ridge coefficients must be finite and ≥ 0".into(),
            ));
        }
        if self.eq_matrix.ncols() != n || self.eq_matrix.nrows() != self.eq_rhs.len() {
            return Err(Error::Dimension(
                "equality system shape is inconsistent".into(),
            ));
        }
        if self
            .eq_matrix
            .iter()
            .chain(self.eq_rhs.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidInput(
                "equality system contains NaN or Inf".into(),
            ));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            let cols = match &b.support {
                Some(s) => {
                    if s.iter().any(|&i| i >= n) {
                        return Err(Error::Dimension(format!("block {k} support out of range")));
                    }
                    let mut sorted = s.clone();
                    sorted.sort_unstable();
                    sorted.dedup();
                    if sorted.len() != s.len() || s.is_empty() {
                        return Err(Error::InvalidInput(format!(
                            "block {k} support has duplicates or is empty"
                        )));
                    }
                    s.len()
                }
                None => n,
            };
            if b.design.ncols() != cols || b.design.nrows() != b.target.len() {
                return Err(Error::Dimension(format!(
                    "block {k} design/target shape is inconsistent"
                )));
            }
            if !b.weight.is_finite() || b.weight < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "block {k} weight must be finite and ≥ 0"
                )));
            }
            if b.design
                .iter()
                .chain(b.target.iter())
                .any(|v| !v.is_finite())
            {
                return Err(Error::InvalidInput(format!(
                    "block {k} contains NaN or Inf"
                )));
            }
        }
        Ok(())
    }

    /// Objective value at `gamma`, evaluated term by term.
    pub fn objective(&self, gamma: &[f64]) -> f64 {
        let blocks: f64 = self
            .blocks
            .iter()
            .map(|b| b.weight * b.residual(gamma).norm_squared())
            .sum();
        let ridge: f64 = self.ridge.iter().zip(gamma).map(|(r, g)| r * g * g).sum();
        blocks + ridge
    }

    /// Gradient of the objective at `gamma`, evaluated term by term.
    pub fn gradient(&self, gamma: &[f64]) -> DVector<f64> {
        let n = self.var_count;
        let mut g =
            DVector::from_iterator(n, self.ridge.iter().zip(gamma).map(|(r, x)| 2.0 * r * x));
        for b in &self.blocks {
            let lin = b.design.tr_mul(&b.residual(gamma)) * (2.0 * b.weight);
            match &b.support {
                Some(s) => {
                    for (a, &i) in s.iter().enumerate() {
                        g[i] += lin[a];
                    }
                }
                None => g += lin,
            }
        }
        g
    }

    /// max_i |(Aγ − b)_i|.
    pub fn eq_residual(&self, gamma: &[f64]) -> f64 {
        if self.eq_count() == 0 {
            return 0.0;
        }
        let x = DVector::from_column_slice(gamma);
        (&self.eq_matrix * x - &self.eq_rhs).amax()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Bound on max |Aγ − b| for an optimal status.
    pub eq_tol: f64,
    /// Bound on the relative stationarity residual for an optimal status.
    pub stat_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            eq_tol: 1e-8,
            stat_tol: 1e-6,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub gamma: Vec<f64>,
    pub status: QpStatus,
    /// max |Aγ − b| in problem units.
    pub primal_residual: f64,
    /// Relative stationarity residual from [`check_kkt`].
    pub kkt_residual: f64,
    pub objective_value: f64,
    pub iterations: usize,
    /// Equality multipliers ν with ∇f + Aᵀν − μ = 0, μ ≥ 0.
    pub eq_multipliers: Vec<f64>,
    pub polished: bool,
    /// For infeasible problems: max |Aγ − b| at the closest nonnegative point.
    pub infeasibility_residual: Option<f64>,
}
