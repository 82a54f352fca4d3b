//! Feature maps balanced by the estimators: unit-level features, cluster
//! means of the sufficient statistic, and their first-order interactions.

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// A single unit-level feature built from raw covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Term {
    Raw(usize),
    Square(usize),
    Interaction(usize, usize),
}

impl Term {
    fn key(self) -> Term {
        match self {
            Term::Interaction(a, b) if a > b => Term::Interaction(b, a),
            t => t,
        }
    }

    fn eval(self, x: &[f64]) -> f64 {
        match self {
            Term::Raw(j) => x[j],
            Term::Square(j) => x[j] * x[j],
            Term::Interaction(a, b) => x[a] * x[b],
        }
    }

    fn name(self, names: &[String]) -> String {
        match self {
            Term::Raw(j) => names[j].clone(),
            Term::Square(j) => format!("{}^2", names[j]),
            Term::Interaction(a, b) => format!("{}*{}", names[a], names[b]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub terms: Vec<Term>,
    pub standardize: bool,
    pub include_intercept: bool,
}

impl FeatureSpec {
    /// Raw covariates only, unstandardized.
    pub fn raw(covariate_count: usize) -> Self {
        FeatureSpec {
            terms: (0..covariate_count).map(Term::Raw).collect(),
            standardize: false,
            include_intercept: false,
        }
    }

    /// Raw covariates plus squares of the continuous ones (more than two
    /// distinct values), standardized.
    pub fn default_for(ds: &Dataset) -> Self {
        let p = ds.covariate_count();
        let mut terms: Vec<Term> = (0..p).map(Term::Raw).collect();
        terms.extend((0..p).filter(|&j| is_continuous(ds, j)).map(Term::Square));
        FeatureSpec {
            terms,
            standardize: true,
            include_intercept: false,
        }
    }

    pub fn validate(&self, covariate_count: usize) -> Result<()> {
        let mut seen = HashSet::new();
        for &t in &self.terms {
            let in_range = match t {
                Term::Raw(j) | Term::Square(j) => j < covariate_count,
                Term::Interaction(a, b) => a < covariate_count && b < covariate_count,
            };
            if !in_range {
                return Err(Error::Feature(format!(
                    "term {t:?} refers to a covariate index outside 0..{covariate_count}"
                )));
            }
            if let Term::Interaction(a, b) = t {
                if a == b {
                    return Err(Error::Feature(format!(
                        "interaction of covariate {a} with itself; use a square term"
                    )));
                }
            }
            if !seen.insert(t.key()) {
                return Err(Error::Feature(format!("duplicate term {t:?}")));
            }
        }
        Ok(())
    }
}

/// True when covariate `j` takes more than two distinct values.
pub fn is_continuous(ds: &Dataset, j: usize) -> bool {
    let mut first: Option<f64> = None;
    let mut second: Option<f64> = None;
    for u in ds.units() {
        let v = u.covariates[j];
        match (first, second) {
            (None, _) => first = Some(v),
            (Some(a), None) if v != a => second = Some(v),
            (Some(a), Some(b)) if v != a && v != b => return true,
            _ => {}
        }
    }
    false
}

/// Unit-level feature matrix with the standardization applied to it.
#[derive(Debug, Clone)]
pub struct PhiBlock {
    /// n × d, one column per retained term.
    pub matrix: DMatrix<f64>,
    pub names: Vec<String>,
    /// Column centers; zero for unstandardized columns.
    pub means: Vec<f64>,
    /// Column scales; one for unstandardized columns.
    pub scales: Vec<f64>,
    pub warnings: Vec<String>,
}

impl PhiBlock {
    /// Maps a standardized value of column `j` back to its original scale.
    pub fn unstandardize(&self, j: usize, value: f64) -> f64 {
        value * self.scales[j] + self.means[j]
    }
}

pub fn build_phi(ds: &Dataset, spec: &FeatureSpec) -> Result<PhiBlock> {
    spec.validate(ds.covariate_count())?;
    let n = ds.n();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    let mut means = Vec::new();
    let mut scales = Vec::new();
    let mut warnings = Vec::new();

    if spec.include_intercept {
        cols.push(vec![1.0; n]);
        names.push("(intercept)".to_string());
        means.push(0.0);
        scales.push(1.0);
    }
    for &t in &spec.terms {
        let mut col: Vec<f64> = ds.units().iter().map(|u| t.eval(&u.covariates)).collect();
        let name = t.name(ds.covariate_names());
        if spec.standardize {
            let (mean, sd) = mean_sd(&col);
            if !(sd > 1e-12 * mean.abs().max(1.0)) {
                warnings.push(format!("feature `{name}` is constant; dropped"));
                continue;
            }
            col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
            means.push(mean);
            scales.push(sd);
        } else {
            means.push(0.0);
            scales.push(1.0);
        }
        cols.push(col);
        names.push(name);
    }
    let d = cols.len();
    let matrix = DMatrix::from_fn(n, d, |i, j| cols[j][i]);
    Ok(PhiBlock {
        matrix,
        names,
        means,
        scales,
        warnings,
    })
}

/// Mean and sample standard deviation (n - 1 denominator).
pub(crate) fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Selects the unit-level statistic S(x, z) whose cluster means are taken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SufficientSpec {
    pub covariates: Vec<usize>,
    pub treated_proportion: bool,
}

impl SufficientSpec {
    /// All raw covariates followed by the treatment indicator.
    pub fn default_for(ds: &Dataset) -> Self {
        SufficientSpec {
            covariates: (0..ds.covariate_count()).collect(),
            treated_proportion: true,
        }
    }

    pub fn width(&self) -> usize {
        self.covariates.len() + usize::from(self.treated_proportion)
    }
}

#[derive(Debug, Clone)]
pub struct SBarBlock {
    /// K × p cluster means, rows in dataset cluster order.
    pub matrix: DMatrix<f64>,
    pub names: Vec<String>,
}

pub fn build_sufficient_stats(ds: &Dataset, spec: &SufficientSpec) -> Result<SBarBlock> {
    if let Some(&j) = spec.covariates.iter().find(|&&j| j >= ds.covariate_count()) {
        return Err(Error::Feature(format!(
            "sufficient statistic refers to covariate {j} outside 0..{}",
            ds.covariate_count()
        )));
    }
    let k = ds.cluster_count();
    let p = spec.width();
    let mut matrix = DMatrix::zeros(k, p);
    for (g, c) in ds.clusters().iter().enumerate() {
        let size = c.len() as f64;
        for &i in &c.members {
            let u = ds.unit(i);
            for (col, &j) in spec.covariates.iter().enumerate() {
                matrix[(g, col)] += u.covariates[j];
            }
            if spec.treated_proportion && u.treated {
                matrix[(g, p - 1)] += 1.0;
            }
        }
        for col in 0..p {
            matrix[(g, col)] /= size;
        }
    }
    let mut names: Vec<String> = spec
        .covariates
        .iter()
        .map(|&j| format!("mean({})", ds.covariate_names()[j]))
        .collect();
    if spec.treated_proportion {
        names.push("prop_treated".into());
    }
    Ok(SBarBlock { matrix, names })
}

/// Broadcasts cluster rows to units: row i is the S̄ row of unit i's cluster.
pub fn broadcast_to_units(ds: &Dataset, s_bar: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(ds.n(), s_bar.ncols(), |i, k| s_bar[(ds.cluster_of(i), k)])
}

#[derive(Debug, Clone)]
pub struct PsiBlock {
    /// n × (d·p); column `j * p + k` is phi column j times S̄ column k.
    pub matrix: DMatrix<f64>,
    pub names: Vec<String>,
    pub sources: Vec<(usize, usize)>,
}

pub fn build_psi(ds: &Dataset, phi: &PhiBlock, s_bar: &SBarBlock) -> Result<PsiBlock> {
    if phi.matrix.nrows() != ds.n() {
        return Err(Error::Dimension(format!(
            "phi has {} rows but the dataset has {} units",
            phi.matrix.nrows(),
            ds.n()
        )));
    }
    if s_bar.matrix.nrows() != ds.cluster_count() {
        return Err(Error::Dimension(format!(
            "s_bar has {} rows but the dataset has {} clusters",
            s_bar.matrix.nrows(),
            ds.cluster_count()
        )));
    }
    let d = phi.matrix.ncols();
    let p = s_bar.matrix.ncols();
    let n = ds.n();
    let mut matrix = DMatrix::zeros(n, d * p);
    let mut names = Vec::with_capacity(d * p);
    let mut sources = Vec::with_capacity(d * p);
    for j in 0..d {
        for k in 0..p {
            let col = j * p + k;
            for i in 0..n {
                matrix[(i, col)] = phi.matrix[(i, j)] * s_bar.matrix[(ds.cluster_of(i), k)];
            }
            names.push(format!("{}:{}", phi.names[j], s_bar.names[k]));
            sources.push((j, k));
        }
    }
    Ok(PsiBlock {
        matrix,
        names,
        sources,
    })
}

/// Everything the estimators balance, built from one dataset.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub phi: PhiBlock,
    pub s_bar: SBarBlock,
    pub psi: PsiBlock,
}

impl FeatureSet {
    pub fn build(ds: &Dataset, spec: &FeatureSpec, s_spec: &SufficientSpec) -> Result<Self> {
        let phi = build_phi(ds, spec)?;
        let s_bar = build_sufficient_stats(ds, s_spec)?;
        let psi = build_psi(ds, &phi, &s_bar)?;
        Ok(FeatureSet { phi, s_bar, psi })
    }

    /// Default feature set: [`FeatureSpec::default_for`] and
    /// [`SufficientSpec::default_for`].
    pub fn default_for(ds: &Dataset) -> Result<Self> {
        Self::build(
            ds,
            &FeatureSpec::default_for(ds),
            &SufficientSpec::default_for(ds),
        )
    }

    pub fn d(&self) -> usize {
        self.phi.matrix.ncols()
    }

    pub fn warnings(&self) -> &[String] {
        &self.phi.warnings
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Unit;

    fn ds(rows: &[(&str, bool, &[f64])]) -> Dataset {
        let p = rows[0].2.len();
        let units = rows
            .iter()
            .enumerate()
            .map(|(i, (g, z, x))| Unit {
                unit_id: i.to_string(),
                cluster_id: g.to_string(),
                treated: *z,
                outcome: 0.0,
                covariates: x.to_vec(),
            })
            .collect();
        Dataset::new(units, (0..p).map(|j| format!("x{}", j + 1)).collect()).unwrap()
    }

    #[test]
    fn raw_terms_reproduce_covariates() {
        let d = ds(&[("a", true, &[1.0, 2.0]), ("a", false, &[3.0, -4.0])]);
        let phi = build_phi(&d, &FeatureSpec::raw(2)).unwrap();
        assert_eq!(
            phi.matrix,
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, -4.0])
        );
        assert_eq!(phi.names, vec!["x1", "x2"]);
    }

    #[test]
    fn square_term() {
        let d = ds(&[
            ("a", true, &[-1.0]),
            ("a", false, &[0.0]),
            ("b", true, &[2.0]),
        ]);
        let spec = FeatureSpec {
            terms: vec![Term::Square(0)],
            standardize: false,
            include_intercept: false,
        };
        let phi = build_phi(&d, &spec).unwrap();
        assert_eq!(phi.matrix.column(0).as_slice(), &[1.0, 0.0, 4.0]);
        assert_eq!(phi.names, vec!["x1^2"]);
    }

    #[test]
    fn standardization_drops_constant_columns() {
        let d = ds(&[
            ("a", true, &[1.0, 5.0]),
            ("a", false, &[2.0, 5.0]),
            ("b", true, &[4.0, 5.0]),
        ]);
        let spec = FeatureSpec {
            terms: vec![Term::Raw(0), Term::Raw(1)],
            standardize: true,
            include_intercept: false,
        };
        let phi = build_phi(&d, &spec).unwrap();
        assert_eq!(phi.matrix.ncols(), 1);
        assert_eq!(phi.warnings.len(), 1);
        let (m, s) = mean_sd(phi.matrix.column(0).as_slice());
        assert!(m.abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        assert!((phi.unstandardize(0, phi.matrix[(2, 0)]) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        let bad = |terms| FeatureSpec {
            terms,
            standardize: false,
            include_intercept: false,
        };
        assert!(bad(vec![Term::Raw(3)]).validate(2).is_err());
        assert!(bad(vec![Term::Interaction(0, 1), Term::Interaction(1, 0)])
            .validate(2)
            .is_err());
        assert!(bad(vec![Term::Interaction(1, 1)]).validate(2).is_err());
        assert!(
            bad(vec![Term::Raw(0), Term::Square(0), Term::Interaction(0, 1)])
                .validate(2)
                .is_ok()
        );
    }

    #[test]
    fn treated_proportion_and_singletons() {
        let d = ds(&[
            ("a", true, &[1.0]),
            ("a", false, &[2.0]),
            ("a", false, &[3.0]),
            ("a", true, &[6.0]),
            ("b", false, &[7.5]),
        ]);
        let s = build_sufficient_stats(&d, &SufficientSpec::default_for(&d)).unwrap();
        assert_eq!(s.names, vec!["mean(x1)", "prop_treated"]);
        assert_eq!(s.matrix[(0, 1)], 0.5);
        assert_eq!(s.matrix[(0, 0)], 3.0);
        assert_eq!(s.matrix[(1, 0)], 7.5);
        assert_eq!(s.matrix[(1, 1)], 0.0);
    }

    #[test]
    fn psi_products() {
        let d = ds(&[
            ("a", true, &[2.0]),
            ("a", true, &[2.0]),
            ("a", false, &[2.0]),
            ("a", false, &[2.0]),
            ("b", false, &[3.0]),
        ]);
        let phi = build_phi(&d, &FeatureSpec::raw(1)).unwrap();
        let s_bar = build_sufficient_stats(
            &d,
            &SufficientSpec {
                covariates: vec![],
                treated_proportion: true,
            },
        )
        .unwrap();
        let psi = build_psi(&d, &phi, &s_bar).unwrap();
        assert_eq!(psi.matrix[(0, 0)], 1.0);
        // cluster b has no treated units, so its psi row vanishes
        assert_eq!(psi.matrix[(4, 0)], 0.0);
        assert_eq!(psi.names, vec!["x1:prop_treated"]);
    }

    #[test]
    fn psi_dimension_mismatch() {
        let d = ds(&[("a", true, &[2.0]), ("b", false, &[3.0])]);
        let phi = build_phi(&d, &FeatureSpec::raw(1)).unwrap();
        let s_bar = SBarBlock {
            matrix: DMatrix::zeros(3, 1),
            names: vec!["s".into()],
        };
        assert!(matches!(
            build_psi(&d, &phi, &s_bar),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn continuity_detection() {
        let d = ds(&[
            ("a", true, &[0.0, 0.1]),
            ("a", false, &[1.0, 0.2]),
            ("b", true, &[1.0, 0.3]),
        ]);
        assert!(!is_continuous(&d, 0));
        assert!(is_continuous(&d, 1));
        let spec = FeatureSpec::default_for(&d);
        assert_eq!(
            spec.terms,
            vec![Term::Raw(0), Term::Raw(1), Term::Square(1)]
        );
    }
}
