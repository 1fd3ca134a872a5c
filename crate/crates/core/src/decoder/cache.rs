//! Persistent, content-addressed store of decoder outputs.
//!
//! Append-only JSONL; every line is
//! `{"key","preimage","probs":[...],"backend_id","ts"}`. The full preimage is
//! stored so a lookup can detect key collisions.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ChoiceDistribution;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub key: String,
    pub preimage: String,
}

/// Derive the cache key. The conditioning text is hashed byte-for-byte with no
/// whitespace canonicalization.
pub fn cache_key(backend_id: &str, instance_id: &str, choices: &[String], conditioning: &str) -> CacheKey {
    let preimage = serde_json::to_string(&(backend_id, instance_id, choices, conditioning))
        .expect("string tuples always serialize");
    let key = hex::encode(Sha256::digest(preimage.as_bytes()));
    CacheKey { key, preimage }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    preimage: String,
    probs: ChoiceDistribution,
    backend_id: String,
    ts: u64,
}

#[derive(Debug)]
pub struct DistributionCache {
    path: PathBuf,
    index: RwLock<HashMap<String, CacheEntry>>,
    writer: Mutex<File>,
}

impl DistributionCache {
    /// Open (or create) the cache file and load its index.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut index = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(entry) => {
                        index.entry(entry.key.clone()).or_insert(entry);
                    }
                    // a torn final write must not poison the whole cache
                    Err(e) => log::warn!("{}:{}: skipping unreadable cache line: {e}", path.display(), n + 1),
                }
            }
        }
        let mut writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.last().is_some_and(|&b| b != b'\n') {
            writer.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        Ok(DistributionCache {
            path,
            index: RwLock::new(index),
            writer: Mutex::new(writer),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache index poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<ChoiceDistribution> {
        let index = self.index.read().expect("cache index poisoned");
        let entry = index.get(&key.key)?;
        if entry.preimage != key.preimage {
            log::warn!(
                "cache key {} collides with a different preimage; treating as miss",
                key.key
            );
            return None;
        }
        Some(entry.probs.clone())
    }

    pub fn put(&self, key: &CacheKey, backend_id: &str, dist: &ChoiceDistribution) -> Result<()> {
        let entry = CacheEntry {
            key: key.key.clone(),
            preimage: key.preimage.clone(),
            probs: dist.clone(),
            backend_id: backend_id.to_string(),
            ts: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        {
            let mut writer = self.writer.lock().expect("cache writer poisoned");
            writer
                .write_all(line.as_bytes())
                .and_then(|_| writer.flush())
                .map_err(|e| Error::io(&self.path, e))?;
            self.index
                .write()
                .expect("cache index poisoned")
                .entry(entry.key.clone())
                .or_insert(entry);
        }
        Ok(())
    }
}
