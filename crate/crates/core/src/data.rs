//! Clustered observational dataset: validation, CSV ingestion and export,
//! and removal of clusters that lack one of the treatment arms.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::num;

/// One study unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub unit_id: String,
    pub cluster_id: String,
    pub treated: bool,
    pub outcome: f64,
    pub covariates: Vec<f64>,
}

/// Positions of a cluster's members together with its arm counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: String,
    pub members: Vec<usize>,
    pub n_treated: usize,
    pub n_control: usize,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// True when the cluster holds only treated or only control units.
    pub fn is_degenerate(&self) -> bool {
        self.n_treated == 0 || self.n_control == 0
    }
}

/// Validated clustered dataset. Immutable once built.
///
/// Clusters are indexed densely in order of first appearance; the dense
/// index is internal and outputs always use the original cluster ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    units: Vec<Unit>,
    covariate_names: Vec<String>,
    clusters: Vec<Cluster>,
    cluster_of: Vec<usize>,
    lookup: HashMap<String, usize>,
    n_treated: usize,
}

impl Dataset {
    /// Validates the units and builds the cluster index.
    pub fn new(units: Vec<Unit>, covariate_names: Vec<String>) -> Result<Self> {
        let p = covariate_names.len();
        let mut seen_ids = HashMap::with_capacity(units.len());
        for (row, u) in units.iter().enumerate() {
            if u.covariates.len() != p {
                return Err(Error::InvalidDataset(format!(
                    "unit `{}` has {} covariates, expected {}",
                    u.unit_id,
                    u.covariates.len(),
                    p
                )));
            }
            if !u.outcome.is_finite() || u.covariates.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "unit `{}` has a non-finite outcome or covariate",
                    u.unit_id
                )));
            }
            if seen_ids.insert(u.unit_id.as_str(), row).is_some() {
                return Err(Error::InvalidDataset(format!(
                    "duplicate unit id `{}`",
                    u.unit_id
                )));
            }
        }

        let mut clusters: Vec<Cluster> = Vec::new();
        let mut lookup: HashMap<String, usize> = HashMap::new();
        let mut cluster_of = Vec::with_capacity(units.len());
        for (i, u) in units.iter().enumerate() {
            let g = *lookup.entry(u.cluster_id.clone()).or_insert_with(|| {
                clusters.push(Cluster {
                    id: u.cluster_id.clone(),
                    members: Vec::new(),
                    n_treated: 0,
                    n_control: 0,
                });
                clusters.len() - 1
            });
            let c = &mut clusters[g];
            c.members.push(i);
            if u.treated {
                c.n_treated += 1;
            } else {
                c.n_control += 1;
            }
            cluster_of.push(g);
        }

        let n_treated = units.iter().filter(|u| u.treated).count();
        if n_treated == 0 {
            return Err(Error::EstimandUndefined(
                "dataset has no treated units".into(),
            ));
        }
        if n_treated == units.len() {
            return Err(Error::InvalidDataset("dataset has no control units".into()));
        }

        let ds = Dataset {
            units,
            covariate_names,
            clusters,
            cluster_of,
            lookup,
            n_treated,
        };
        debug_assert!(ds.counts_consistent());
        Ok(ds)
    }

    fn counts_consistent(&self) -> bool {
        let n1: usize = self.clusters.iter().map(|c| c.n_treated).sum();
        let n0: usize = self.clusters.iter().map(|c| c.n_control).sum();
        let members: usize = self.clusters.iter().map(|c| c.len()).sum();
        n1 == self.n1() && n0 == self.n0() && members == self.n()
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn unit(&self, i: usize) -> &Unit {
        &self.units[i]
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_count(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    /// Dense cluster index of unit `i`.
    pub fn cluster_of(&self, i: usize) -> usize {
        self.cluster_of[i]
    }

    /// Member positions of the cluster with the given id.
    pub fn cluster_members(&self, id: &str) -> Option<&[usize]> {
        self.lookup
            .get(id)
            .map(|&g| self.clusters[g].members.as_slice())
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn n1(&self) -> usize {
        self.n_treated
    }

    pub fn n0(&self) -> usize {
        self.units.len() - self.n_treated
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.units[i].treated).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.units[i].treated).collect()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.outcome).collect()
    }

    pub fn degenerate_cluster_count(&self) -> usize {
        self.clusters.iter().filter(|c| c.is_degenerate()).count()
    }
}

/// Column-name bindings for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    /// Unit identifier column; when absent the 1-based data row number is used.
    #[serde(default)]
    pub unit_id: Option<String>,
    pub treatment: String,
    pub outcome: String,
    pub cluster: String,
    pub covariates: Vec<String>,
}

impl Schema {
    /// Bindings matching the layout produced by [`write_csv`].
    pub fn canonical(covariates: &[String]) -> Self {
        Schema {
            unit_id: Some("unit_id".into()),
            treatment: "treatment".into(),
            outcome: "outcome".into(),
            cluster: "cluster_id".into(),
            covariates: covariates.to_vec(),
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn {
            column: name.to_string(),
        })
}

fn parse_real(raw: &str, row: usize, col: &str) -> Result<f64> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Err(Error::Row {
            row,
            message: format!("missing value in column `{col}`"),
        });
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(Error::Row {
            row,
            message: format!("non-finite value `{s}` in column `{col}`"),
        }),
        Err(_) => Err(Error::Row {
            row,
            message: format!("non-numeric value `{s}` in column `{col}`"),
        }),
    }
}

/// Reads a dataset from a headered CSV file. Row numbers in errors count
/// data records from 1, excluding the header.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, schema)
}

/// Reads a dataset from any reader holding CSV text.
pub fn read_csv<R: std::io::Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    if schema.covariates.is_empty() {
        return Err(Error::Schema(
            "at least one covariate column is required".into(),
        ));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_col = schema
        .unit_id
        .as_deref()
        .map(|c| column(&headers, c))
        .transpose()?;
    let z_col = column(&headers, &schema.treatment)?;
    let y_col = column(&headers, &schema.outcome)?;
    let g_col = column(&headers, &schema.cluster)?;
    let x_cols = schema
        .covariates
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<Vec<_>>>()?;

    let mut units = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let z_raw = field(z_col).trim();
        let treated = match z_raw.parse::<f64>() {
            Ok(1.0) => true,
            Ok(0.0) => false,
            _ => {
                return Err(Error::Row {
                    row,
                    message: format!(
                        "treatment value `{z_raw}` in column `{}` is not binary (0/1)",
                        schema.treatment
                    ),
                })
            }
        };
        let outcome = parse_real(field(y_col), row, &schema.outcome)?;
        let covariates = x_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&c, name)| parse_real(field(c), row, name))
            .collect::<Result<Vec<_>>>()?;
        let cluster_id = field(g_col).trim().to_string();
        if cluster_id.is_empty() {
            return Err(Error::Row {
                row,
                message: format!("missing cluster id in column `{}`", schema.cluster),
            });
        }
        let unit_id = match id_col {
            Some(c) => field(c).trim().to_string(),
            None => row.to_string(),
        };
        units.push(Unit {
            unit_id,
            cluster_id,
            treated,
            outcome,
            covariates,
        });
    }
    Dataset::new(units, schema.covariates.clone())
}

/// Writes the dataset in the canonical layout (see [`Schema::canonical`]).
/// Values are written with 17 significant digits.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut buf = Vec::new();
    write_csv_to(ds, &mut buf)?;
    file.write_all(&buf).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_csv_to<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["unit_id", "cluster_id", "treatment", "outcome"];
    header.extend(ds.covariate_names().iter().map(String::as_str));
    w.write_record(&header)?;
    for u in ds.units() {
        let mut rec = vec![
            u.unit_id.clone(),
            u.cluster_id.clone(),
            if u.treated { "1".into() } else { "0".into() },
            num(u.outcome),
        ];
        rec.extend(u.covariates.iter().map(|&x| num(x)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<csv writer>".into(),
        source,
    })?;
    Ok(())
}

/// Which degenerate clusters to remove.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    DropNoTreated,
    DropNoControl,
    DropBoth,
    #[default]
    KeepAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    NoTreated,
    NoControl,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroppedCluster {
    pub cluster_id: String,
    pub reason: DropReason,
    pub units: usize,
}

#[derive(Debug, Clone)]
pub struct ClusterFilterReport {
    pub dropped_clusters: Vec<DroppedCluster>,
    pub dropped_unit_count: usize,
    pub retained: Dataset,
    /// Set whenever anything was dropped: the ATT now refers to the retained
    /// population only.
    pub estimand_changed: bool,
}

/// Removes clusters lacking treated and/or control units according to `mode`.
pub fn filter_degenerate_clusters(ds: &Dataset, mode: FilterMode) -> Result<ClusterFilterReport> {
    let reason_for = |c: &Cluster| -> Option<DropReason> {
        let no_t = c.n_treated == 0;
        let no_c = c.n_control == 0;
        match mode {
            FilterMode::KeepAll => None,
            FilterMode::DropNoTreated if no_t => Some(DropReason::NoTreated),
            FilterMode::DropNoControl if no_c => Some(DropReason::NoControl),
            FilterMode::DropBoth if no_t => Some(DropReason::NoTreated),
            FilterMode::DropBoth if no_c => Some(DropReason::NoControl),
            _ => None,
        }
    };

    let mut dropped_clusters = Vec::new();
    let mut keep = vec![true; ds.cluster_count()];
    for (g, c) in ds.clusters().iter().enumerate() {
        if let Some(reason) = reason_for(c) {
            keep[g] = false;
            dropped_clusters.push(DroppedCluster {
                cluster_id: c.id.clone(),
                reason,
                units: c.len(),
            });
        }
    }

    if dropped_clusters.is_empty() {
        return Ok(ClusterFilterReport {
            dropped_clusters,
            dropped_unit_count: 0,
            retained: ds.clone(),
            estimand_changed: false,
        });
    }

    let units: Vec<Unit> = ds
        .units()
        .iter()
        .enumerate()
        .filter(|(i, _)| keep[ds.cluster_of(*i)])
        .map(|(_, u)| u.clone())
        .collect();
    if !units.iter().any(|u| u.treated) {
        return Err(Error::EstimandUndefined(
            "cluster filtering removed every treated unit".into(),
        ));
    }
    let retained = Dataset::new(units, ds.covariate_names().to_vec())?;
    let dropped_unit_count = ds.n() - retained.n();
    Ok(ClusterFilterReport {
        dropped_clusters,
        dropped_unit_count,
        retained,
        estimand_changed: true,
    })
}
