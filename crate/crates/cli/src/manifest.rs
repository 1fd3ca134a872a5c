//! Run manifest: everything needed to reproduce the artifacts in an output
//! directory. Timestamps live here and nowhere else.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use valprof_core::io::{read_json, write_json};
use valprof_core::{Error, Result};

use crate::config::RunConfig;

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub command: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub encoder_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub seed: u64,
    pub sub_seeds: BTreeMap<String, u64>,
    /// Input file path to hex SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub runs: Vec<RunEntry>,
}

impl Manifest {
    pub fn new(config: &RunConfig, sub_seeds: BTreeMap<String, u64>) -> Self {
        Manifest {
            tool: TOOL.into(),
            version: VERSION.into(),
            core_version: valprof_core::VERSION.into(),
            config_hash: config.hash(),
            config: config.clone(),
            seed: config.seed,
            sub_seeds,
            inputs: BTreeMap::new(),
            runs: Vec::new(),
        }
    }

    /// Continue an existing manifest when it was written for the same
    /// config; start over otherwise.
    pub fn open_or_new(path: &Path, config: &RunConfig, sub_seeds: BTreeMap<String, u64>) -> Self {
        match read_json::<Manifest>(path) {
            Ok(m) if m.config_hash == config.hash() => m,
            Ok(_) => {
                log::warn!(
                    "config changed since {} was written; starting a new manifest",
                    path.display()
                );
                Self::new(config, sub_seeds)
            }
            Err(_) => Self::new(config, sub_seeds),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha_of_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn reopening_keeps_runs_for_the_same_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let cfg = RunConfig::default();
        let mut m = Manifest::new(&cfg, BTreeMap::new());
        m.runs.push(RunEntry {
            command: "ingest".into(),
            started_unix: 1,
            finished_unix: 2,
            backend_calls: 0,
            cache_hits: 0,
            encoder_calls: 0,
        });
        m.save(&path).unwrap();
        assert_eq!(Manifest::open_or_new(&path, &cfg, BTreeMap::new()).runs.len(), 1);
        let other = RunConfig { seed: 5, ..cfg };
        assert!(Manifest::open_or_new(&path, &other, BTreeMap::new()).runs.is_empty());
    }
}
