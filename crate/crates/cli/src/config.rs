//! JSON run configuration for the `estimate` and `balance` subcommands.

use std::fmt;
use std::path::{Path, PathBuf};

use clusterbw::data::{Dataset, FilterMode, Schema};
use clusterbw::diagnostics::BalanceBlock;
use clusterbw::estimators::{Lambda, Method};
use clusterbw::features::{is_continuous, FeatureSpec, SufficientSpec, Term};
use clusterbw::inference::OutcomeAssumption;
use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset path, relative to the config file's directory.
    pub input: PathBuf,
    pub schema: Schema,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub sufficient: SufficientConfig,
    #[serde(default = "all_methods")]
    pub estimators: Vec<EstimatorEntry>,
    #[serde(default = "auto")]
    pub lambda: Lambda,
    /// Applied to every method when set; otherwise clusters lacking an arm
    /// are dropped only for methods that cannot handle them.
    #[serde(default)]
    pub cluster_filter: Option<FilterMode>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "yes")]
    pub bias_correct: bool,
    /// Outcome-model covariate set; each method's own default when unset.
    #[serde(default)]
    pub outcome_model: Option<OutcomeAssumption>,
    #[serde(default)]
    pub penalty_fallback: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_blocks")]
    pub balance_blocks: Vec<BalanceBlock>,
}

fn all_methods() -> Vec<EstimatorEntry> {
    Method::ALL
        .iter()
        .map(|&m| EstimatorEntry::plain(m))
        .collect()
}

fn auto() -> Lambda {
    Lambda::Auto
}

fn default_alpha() -> f64 {
    0.05
}

fn yes() -> bool {
    true
}

fn default_blocks() -> Vec<BalanceBlock> {
    vec![BalanceBlock::Unit, BalanceBlock::Cluster]
}

/// One estimator, written either as its name or as an object with options.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorEntry {
    pub method: Method,
    pub lambda: Option<Lambda>,
    pub standardize_within_cluster: Option<bool>,
}

impl EstimatorEntry {
    pub fn plain(method: Method) -> Self {
        EstimatorEntry {
            method,
            lambda: None,
            standardize_within_cluster: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimatorObject {
    method: Method,
    #[serde(default)]
    lambda: Option<Lambda>,
    #[serde(default)]
    standardize_within_cluster: Option<bool>,
}

impl<'de> Deserialize<'de> for EstimatorEntry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = EstimatorEntry;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an estimator name or an object with a `method` field")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<EstimatorEntry, E> {
                Method::deserialize(de::value::StrDeserializer::new(v)).map(EstimatorEntry::plain)
            }

            fn visit_map<A: MapAccess<'de>>(self, map: A) -> Result<EstimatorEntry, A::Error> {
                let o = EstimatorObject::deserialize(de::value::MapAccessDeserializer::new(map))?;
                Ok(EstimatorEntry {
                    method: o.method,
                    lambda: o.lambda,
                    standardize_within_cluster: o.standardize_within_cluster,
                })
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SquareKeyword {
    /// Covariates with more than two distinct values.
    Continuous,
    All,
    None,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Squares {
    Keyword(SquareKeyword),
    Names(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InteractionKeyword {
    All,
    None,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Interactions {
    Keyword(InteractionKeyword),
    Pairs(Vec<[String; 2]>),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub squares: Squares,
    pub interactions: Interactions,
    pub standardize: bool,
    pub include_intercept: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            squares: Squares::Keyword(SquareKeyword::Continuous),
            interactions: Interactions::Keyword(InteractionKeyword::None),
            standardize: true,
            include_intercept: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SufficientConfig {
    /// Covariates whose cluster means enter S̄; all when unset.
    pub covariates: Option<Vec<String>>,
    pub treated_proportion: bool,
}

impl Default for SufficientConfig {
    fn default() -> Self {
        SufficientConfig {
            covariates: None,
            treated_proportion: true,
        }
    }
}

fn index_of(names: &[String], name: &str, field: &str) -> Result<usize, CliError> {
    names.iter().position(|n| n == name).ok_or_else(|| {
        CliError::Config(format!(
            "{field}: `{name}` is not a covariate listed in schema.covariates"
        ))
    })
}

impl FeatureConfig {
    /// Resolves covariate names against the dataset. Continuity is judged
    /// on the full dataset so every method sees the same terms.
    pub fn to_spec(&self, ds: &Dataset) -> Result<FeatureSpec, CliError> {
        let names = ds.covariate_names();
        let p = names.len();
        let mut terms: Vec<Term> = (0..p).map(Term::Raw).collect();
        match &self.squares {
            Squares::Keyword(SquareKeyword::Continuous) => {
                terms.extend((0..p).filter(|&j| is_continuous(ds, j)).map(Term::Square))
            }
            Squares::Keyword(SquareKeyword::All) => terms.extend((0..p).map(Term::Square)),
            Squares::Keyword(SquareKeyword::None) => {}
            Squares::Names(list) => {
                for name in list {
                    terms.push(Term::Square(index_of(names, name, "features.squares")?));
                }
            }
        }
        match &self.interactions {
            Interactions::Keyword(InteractionKeyword::All) => {
                for a in 0..p {
                    for b in a + 1..p {
                        terms.push(Term::Interaction(a, b));
                    }
                }
            }
            Interactions::Keyword(InteractionKeyword::None) => {}
            Interactions::Pairs(pairs) => {
                for [a, b] in pairs {
                    terms.push(Term::Interaction(
                        index_of(names, a, "features.interactions")?,
                        index_of(names, b, "features.interactions")?,
                    ));
                }
            }
        }
        let spec = FeatureSpec {
            terms,
            standardize: self.standardize,
            include_intercept: self.include_intercept,
        };
        spec.validate(p)
            .map_err(|e| CliError::Config(format!("features: {e}")))?;
        Ok(spec)
    }
}

impl SufficientConfig {
    pub fn to_spec(&self, ds: &Dataset) -> Result<SufficientSpec, CliError> {
        let names = ds.covariate_names();
        let covariates = match &self.covariates {
            None => (0..names.len()).collect(),
            Some(list) => list
                .iter()
                .map(|n| index_of(names, n, "sufficient.covariates"))
                .collect::<Result<_, _>>()?,
        };
        Ok(SufficientSpec {
            covariates,
            treated_proportion: self.treated_proportion,
        })
    }
}

impl RunConfig {
    pub fn check(&self) -> Result<(), CliError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CliError::Config(format!(
                "alpha: must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        let mut seen = Vec::new();
        for e in &self.estimators {
            if seen.contains(&e.method) {
                return Err(CliError::Config(format!(
                    "estimators: `{}` listed twice",
                    e.method
                )));
            }
            seen.push(e.method);
            if e.standardize_within_cluster.is_some() && e.method != Method::RiIpw {
                return Err(CliError::Config(format!(
                    "estimators: standardize_within_cluster applies only to ri-ipw, not `{}`",
                    e.method
                )));
            }
        }
        if self.balance_blocks.is_empty() {
            return Err(CliError::Config("balance_blocks: must not be empty".into()));
        }
        Ok(())
    }

    pub fn input_path(&self, config_path: &Path) -> PathBuf {
        if self.input.is_absolute() {
            self.input.clone()
        } else {
            config_path
                .parent()
                .unwrap_or(Path::new("."))
                .join(&self.input)
        }
    }
}

/// Parses JSON into `T`, reporting the path of the offending field.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            CliError::Config(inner.to_string())
        } else {
            CliError::Config(format!("{path}: {inner}"))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(extra: &str) -> String {
        format!(
            r#"{{"input": "d.csv", "schema": {{"treatment": "z", "outcome": "y", "cluster": "g", "covariates": ["a", "b"]}}{extra}}}"#
        )
    }

    #[test]
    fn defaults() {
        let c: RunConfig = parse_json(&minimal("")).unwrap();
        assert_eq!(c.estimators.len(), Method::ALL.len());
        assert_eq!(c.lambda, Lambda::Auto);
        assert_eq!(c.alpha, 0.05);
        assert!(c.bias_correct);
        assert_eq!(c.features, FeatureConfig::default());
        c.check().unwrap();
    }

    #[test]
    fn estimator_entries_accept_names_and_objects() {
        let c: RunConfig = parse_json(&minimal(
            r#", "estimators": ["standard-bw", {"method": "ri-ipw", "standardize_within_cluster": false}, {"method": "mundlak-gb", "lambda": 0.5}]"#,
        ))
        .unwrap();
        assert_eq!(c.estimators[0], EstimatorEntry::plain(Method::StandardBw));
        assert_eq!(c.estimators[1].standardize_within_cluster, Some(false));
        assert_eq!(c.estimators[2].lambda, Some(Lambda::Fixed(0.5)));
    }

    #[test]
    fn unknown_estimator_names_the_field() {
        let err = parse_json::<RunConfig>(&minimal(r#", "estimators": ["standard-bw", "magic"]"#))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("estimators[1]"), "{msg}");
        assert!(msg.contains("magic"), "{msg}");
    }

    #[test]
    fn unknown_field_is_rejected_with_path() {
        let err = parse_json::<RunConfig>(&minimal(
            r#", "features": {"squares": "all", "cubes": true}"#,
        ))
        .unwrap_err();
        assert!(err.to_string().contains("features"), "{err}");
    }

    #[test]
    fn duplicate_estimators_fail_check() {
        let c: RunConfig = parse_json(&minimal(r#", "estimators": ["ri-ipw", "ri-ipw"]"#)).unwrap();
        assert!(c.check().is_err());
    }
}
