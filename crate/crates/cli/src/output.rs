//! Output files tagged with the config hash and seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_bytes: &[u8], seed: u64) -> Self {
        Provenance {
            config_sha256: hex::encode(Sha256::digest(config_bytes)),
            seed,
        }
    }

    pub fn comment(&self) -> String {
        format!(
            "# config_sha256={} seed={}\n",
            self.config_sha256, self.seed
        )
    }
}

pub struct OutDir {
    dir: PathBuf,
    pub written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| {
            CliError::Input(format!(
                "cannot create output directory {}: {e}",
                dir.display()
            ))
        })?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        self.written.push(path);
        Ok(())
    }

    /// CSV body produced by `fill`, preceded by the provenance comment line.
    pub fn csv<F>(&mut self, name: &str, prov: &Provenance, fill: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> clusterbw::Result<()>,
    {
        let mut buf = prov.comment().into_bytes();
        fill(&mut buf).map_err(|e| CliError::Io(format!("cannot format {name}: {e}")))?;
        self.write(name, &buf)
    }

    /// JSON document `{"config_sha256", "seed", ...body}`.
    pub fn json<T: Serialize>(
        &mut self,
        name: &str,
        prov: &Provenance,
        body: &T,
    ) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Tagged<'a, T> {
            #[serde(flatten)]
            provenance: &'a Provenance,
            #[serde(flatten)]
            body: &'a T,
        }
        let mut text = serde_json::to_string_pretty(&Tagged {
            provenance: prov,
            body,
        })
        .map_err(|e| CliError::Io(format!("cannot serialize {name}: {e}")))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

/// Writes rows with the `csv` crate into `out`.
pub fn write_rows<I, R>(out: &mut Vec<u8>, header: &[&str], rows: I) -> clusterbw::Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| clusterbw::Error::Csv(e.into()))?;
    Ok(())
}
