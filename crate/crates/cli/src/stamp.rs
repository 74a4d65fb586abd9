//! Reproducibility stamps written next to every artifact.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Stamp {
    pub command: &'static str,
    pub seed: Option<u64>,
    /// Recipe fingerprint for model commands, otherwise a hash of the inputs.
    pub config_hash: String,
    pub version: &'static str,
    pub created: String,
    pub artifacts: Vec<PathBuf>,
}

impl Stamp {
    pub fn new(command: &'static str, seed: Option<u64>, config_hash: String) -> Self {
        Self {
            command,
            seed,
            config_hash,
            version: dacnet_core::VERSION,
            created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            artifacts: Vec::new(),
        }
    }

    pub fn artifact(mut self, path: &Path) -> Self {
        self.artifacts.push(path.to_path_buf());
        self
    }

    /// `<artifact>.stamp.json`, or `stamp.json` inside a directory artifact.
    pub fn write_beside(&self, artifact: &Path) -> Result<PathBuf> {
        let path = if artifact.is_dir() {
            artifact.join("stamp.json")
        } else {
            let mut name = artifact.file_name().unwrap_or_default().to_os_string();
            name.push(".stamp.json");
            artifact.with_file_name(name)
        };
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Hex SHA-256 over the given parts, each followed by a newline.
pub fn hash_parts<I, B>(parts: I) -> String
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_ref());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}
