//! Structured representation of the QP Hessian
//! `P = diag + Σ_groups E_g L_g E_gᵀ + Gᵀ G` and factorizations of its
//! principal submatrices.
//!
//! Local objective blocks touch disjoint variable groups and become small
//! dense blocks; global blocks are kept as low-rank rows and handled with the
//! Woodbury identity, so a factorization costs O(n r²) instead of O(n³).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::QpProblem;

#[derive(Debug, Clone)]
pub(crate) struct DenseGroup {
    pub indices: Vec<usize>,
    pub matrix: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Structure {
    pub n: usize,
    pub diag: Vec<f64>,
    pub groups: Vec<DenseGroup>,
    /// (group, position within group) for grouped variables.
    pub group_of: Vec<Option<(usize, usize)>>,
    /// r × n low-rank rows; P includes Gᵀ G.
    pub global: DMatrix<f64>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

impl Structure {
    /// Builds `scale · P` and `scale · q` for the problem, where the objective
    /// is `½ γᵀPγ + qᵀγ + const`.
    pub fn from_problem(p: &QpProblem, scale: f64) -> (Structure, DVector<f64>) {
        let n = p.var_count;
        let mut q = DVector::zeros(n);
        let diag: Vec<f64> = p.ridge.iter().map(|r| 2.0 * scale * r).collect();

        let global_rows: usize = p
            .blocks
            .iter()
            .filter(|b| b.support.is_none())
            .map(|b| b.design.nrows())
            .sum();
        // Woodbury only pays off when the global rank is small relative to n.
        let globals_dense = global_rows * 2 > n;
        let full: Vec<usize> = (0..n).collect();
        let support_of = |b: &super::ObjectiveBlock| -> Option<Vec<usize>> {
            match &b.support {
                Some(s) => Some(s.clone()),
                None if globals_dense => Some(full.clone()),
                None => None,
            }
        };

        let mut parent: Vec<usize> = (0..n).collect();
        let mut in_group = vec![false; n];
        for b in &p.blocks {
            if let Some(s) = support_of(b) {
                for w in s.windows(2) {
                    let (a, c) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
                    if a != c {
                        parent[a] = c;
                    }
                }
                for &i in &s {
                    in_group[i] = true;
                }
            }
        }

        let mut root_to_group = vec![usize::MAX; n];
        let mut groups: Vec<DenseGroup> = Vec::new();
        let mut group_of = vec![None; n];
        for i in 0..n {
            if !in_group[i] {
                continue;
            }
            let r = find(&mut parent, i);
            if root_to_group[r] == usize::MAX {
                root_to_group[r] = groups.len();
                groups.push(DenseGroup {
                    indices: Vec::new(),
                    matrix: DMatrix::zeros(0, 0),
                });
            }
            let g = root_to_group[r];
            group_of[i] = Some((g, groups[g].indices.len()));
            groups[g].indices.push(i);
        }
        for g in &mut groups {
            let m = g.indices.len();
            g.matrix = DMatrix::zeros(m, m);
        }

        let mut global = DMatrix::zeros(if globals_dense { 0 } else { global_rows }, n);
        let mut row = 0;
        for b in &p.blocks {
            let w = 2.0 * scale * b.weight;
            match support_of(b) {
                Some(s) => {
                    let (g, _) = group_of[s[0]].expect("grouped");
                    let pos: Vec<usize> = s.iter().map(|&i| group_of[i].unwrap().1).collect();
                    let gram = b.design.transpose() * &b.design;
                    let grp = &mut groups[g].matrix;
                    for (a, &pa) in pos.iter().enumerate() {
                        for (c, &pc) in pos.iter().enumerate() {
                            grp[(pa, pc)] += w * gram[(a, c)];
                        }
                    }
                    let lin = b.design.transpose() * &b.target;
                    for (a, &i) in s.iter().enumerate() {
                        q[i] -= w * lin[a];
                    }
                }
                None => {
                    let sw = w.sqrt();
                    for r in 0..b.design.nrows() {
                        for i in 0..n {
                            global[(row + r, i)] = sw * b.design[(r, i)];
                        }
                    }
                    row += b.design.nrows();
                    let lin = b.design.transpose() * &b.target;
                    for i in 0..n {
                        q[i] -= w * lin[i];
                    }
                }
            }
        }

        (
            Structure {
                n,
                diag,
                groups,
                group_of,
                global,
            },
            q,
        )
    }

    /// P x.
    pub fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y =
            DVector::from_iterator(self.n, self.diag.iter().zip(x.iter()).map(|(d, v)| d * v));
        for g in &self.groups {
            let xs = DVector::from_iterator(g.indices.len(), g.indices.iter().map(|&i| x[i]));
            let ys = &g.matrix * xs;
            for (a, &i) in g.indices.iter().enumerate() {
                y[i] += ys[a];
            }
        }
        if self.global.nrows() > 0 {
            let t = &self.global * x;
            y += self.global.tr_mul(&t);
        }
        y
    }

    /// Factorizes `P_FF + shift·I` for the free index set `free` (sorted).
    pub fn factor(&self, free: &[usize], shift: f64) -> Option<Factor> {
        let nf = free.len();

        let mut singles = Vec::new();
        let mut group_members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.groups.len()];
        for (k, &i) in free.iter().enumerate() {
            match self.group_of[i] {
                Some((g, a)) => group_members[g].push((k, a)),
                None => {
                    let d = self.diag[i] + shift;
                    if !(d > 0.0) {
                        return None;
                    }
                    singles.push((k, 1.0 / d));
                }
            }
        }
        let mut blocks = Vec::new();
        for (g, members) in group_members.into_iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let m = members.len();
            let grp = &self.groups[g];
            let mut mat = DMatrix::zeros(m, m);
            for (r, &(_, a)) in members.iter().enumerate() {
                for (c, &(_, b)) in members.iter().enumerate() {
                    mat[(r, c)] = grp.matrix[(a, b)];
                }
                mat[(r, r)] += self.diag[grp.indices[a]] + shift;
            }
            let chol = Cholesky::new(mat)?;
            blocks.push((members.iter().map(|&(k, _)| k).collect::<Vec<_>>(), chol));
        }

        let r = self.global.nrows();
        let g_free = DMatrix::from_fn(r, nf, |row, k| self.global[(row, free[k])]);
        let mut factor = Factor {
            nf,
            singles,
            blocks,
            g_free,
            h: DMatrix::zeros(nf, 0),
            cap: None,
        };
        if r > 0 {
            let mut h = factor.g_free.transpose();
            factor.apply_block_inverse(&mut h);
            let cap = DMatrix::identity(r, r) + &factor.g_free * &h;
            factor.cap = Some(Cholesky::new(cap)?);
            factor.h = h;
        }
        Some(factor)
    }
}

/// Factorization of a principal submatrix of the structured Hessian.
pub(crate) struct Factor {
    pub nf: usize,
    singles: Vec<(usize, f64)>,
    blocks: Vec<(Vec<usize>, Cholesky<f64, Dyn>)>,
    g_free: DMatrix<f64>,
    h: DMatrix<f64>,
    cap: Option<Cholesky<f64, Dyn>>,
}

impl Factor {
    fn apply_block_inverse(&self, m: &mut DMatrix<f64>) {
        for c in 0..m.ncols() {
            for &(k, inv) in &self.singles {
                m[(k, c)] *= inv;
            }
            for (ks, chol) in &self.blocks {
                let mut v = DVector::from_iterator(ks.len(), ks.iter().map(|&k| m[(k, c)]));
                chol.solve_mut(&mut v);
                for (a, &k) in ks.iter().enumerate() {
                    m[(k, c)] = v[a];
                }
            }
        }
    }

    /// Solves `(P_FF + shift·I) x = rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut y = DMatrix::from_column_slice(self.nf, 1, rhs.as_slice());
        self.apply_block_inverse(&mut y);
        let mut y = y.column(0).into_owned();
        if let Some(cap) = &self.cap {
            let t = &self.g_free * &y;
            let w = cap.solve(&t);
            y -= &self.h * w;
        }
        y
    }
}

/// Factorization of the equality-constrained system
/// `[M Aᵀ; A 0] [x; ν] = [r; b]` by the Schur complement on `A`.
pub(crate) struct KktFactor {
    pub m: Factor,
    a: DMatrix<f64>,
    h_a: DMatrix<f64>,
    schur: Option<Cholesky<f64, Dyn>>,
}

impl KktFactor {
    /// `a` holds the equality rows restricted to the free columns.
    pub fn new(m: Factor, a: DMatrix<f64>) -> Option<KktFactor> {
        let k = a.nrows();
        if k == 0 {
            return Some(KktFactor {
                m,
                a,
                h_a: DMatrix::zeros(0, 0),
                schur: None,
            });
        }
        let mut h_a = DMatrix::zeros(m.nf, k);
        for row in 0..k {
            let col = m.solve(&a.row(row).transpose());
            h_a.set_column(row, &col);
        }
        let mut s = &a * &h_a;
        s = (&s + s.transpose()) * 0.5;
        let schur = match Cholesky::new(s.clone()) {
            Some(c) => c,
            None => {
                let tr = s.trace().abs() / k as f64;
                let reg = 1e-12 * tr.max(1e-300);
                for i in 0..k {
                    s[(i, i)] += reg;
                }
                Cholesky::new(s)?
            }
        };
        Some(KktFactor {
            m,
            a,
            h_a,
            schur: Some(schur),
        })
    }

    /// Returns `(x, ν)` solving the equality-constrained system.
    pub fn solve(&self, r: &DVector<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let y = self.m.solve(r);
        match &self.schur {
            None => (y, DVector::zeros(0)),
            Some(s) => {
                let nu = s.solve(&(&self.a * &y - b));
                let x = y - &self.h_a * &nu;
                (x, nu)
            }
        }
    }
}
