//! Run manifest: the record that makes stages cacheable and reports
//! reproducible.
//!
//! Each completed stage stores a cache key (tool version, the config slice
//! the stage reads, and the keys of everything upstream) plus the SHA-256
//! of every artifact it wrote. A stage whose key matches and whose
//! artifacts all verify is skipped; anything else reruns. Downstream
//! stages verify their inputs the same way, so a stale or hand-edited
//! cache is an error, never silently consumed.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Hex SHA-256 of a file's contents.
pub fn hash_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Cache key over an ordered list of parts (tool version, config slices,
/// upstream keys). Parts are length-prefixed so no two part lists collide
/// by concatenation.
pub fn stage_key(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    format!("{:x}", h.finalize())
}

/// One completed stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    /// Cache key the stage ran under.
    pub key: String,
    /// Run-relative artifact path to content hash, sorted by path.
    pub artifacts: BTreeMap<String, String>,
    /// Wall-clock time of the last real execution, in milliseconds. The
    /// only non-reproducible value in the run; reports never include it.
    pub wall_ms: u64,
}

/// Everything needed to reproduce and verify a run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Crate version that wrote the manifest.
    pub version: String,
    pub run_name: String,
    pub seed: u64,
    /// Hash of the effective configuration (after CLI overrides).
    pub config_hash: String,
    /// Canonical TOML snapshot of that configuration.
    pub config_toml: String,
    /// Stage name to completion record.
    pub stages: BTreeMap<String, StageEntry>,
}

impl RunManifest {
    pub fn new(run_name: &str, seed: u64, config_hash: &str, config_toml: &str) -> Self {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            run_name: run_name.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            config_toml: config_toml.to_string(),
            stages: BTreeMap::new(),
        }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    /// Loads the manifest if the run directory has one.
    pub fn load(run_dir: &Path) -> Result<Option<RunManifest>> {
        let path = Self::path(run_dir);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        Ok(Some(m))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = Self::path(run_dir);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn stage(&self, name: &str) -> Option<&StageEntry> {
        self.stages.get(name)
    }

    /// Records a stage completion, replacing any previous entry.
    pub fn record_stage(
        &mut self,
        name: &str,
        key: String,
        artifacts: BTreeMap<String, String>,
        wall_ms: u64,
    ) {
        self.stages.insert(
            name.to_string(),
            StageEntry {
                key,
                artifacts,
                wall_ms,
            },
        );
    }

    /// Whether `name` completed under `key` and every artifact still
    /// verifies. A missing entry, a key mismatch, and a missing or edited
    /// artifact all report `false`; only an unreadable file errors.
    pub fn stage_valid(&self, run_dir: &Path, name: &str, key: &str) -> Result<bool> {
        let Some(entry) = self.stages.get(name) else {
            return Ok(false);
        };
        if entry.key != key {
            return Ok(false);
        }
        for (rel, want) in &entry.artifacts {
            let path = run_dir.join(rel);
            if !path.is_file() {
                return Ok(false);
            }
            if hash_file(&path)? != *want {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
