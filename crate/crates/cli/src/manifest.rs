//! `manifest.json`: one per output directory, listing every artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub command: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub core_version: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    /// Relative path (forward slashes) to record.
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    /// Wall-clock seconds of the most recent run of each command.
    pub timings: BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(config_sha256: String, seeds: BTreeMap<String, u64>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            core_version: rfmsteer::VERSION.into(),
            config_sha256,
            seeds,
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    /// Loads the existing manifest when it belongs to the same config,
    /// otherwise starts fresh.
    pub fn open(dir: &Path, config_sha256: &str, seeds: BTreeMap<String, u64>) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
            if let Ok(m) = serde_json::from_str::<RunManifest>(&text) {
                if m.config_sha256 == config_sha256 {
                    return Ok(Self { seeds, ..m });
                }
                log::warn!("config changed since the last run; starting a fresh manifest");
            }
        }
        Ok(Self::new(config_sha256.to_string(), seeds))
    }

    pub fn record(&mut self, dir: &Path, rel: &str, command: &str) -> CliResult<()> {
        let path = dir.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        self.artifacts.insert(
            rel.to_string(),
            ArtifactRecord {
                command: command.into(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }
}

/// Every regular file under `dir`, as sorted relative paths.
pub fn list_files(dir: &Path) -> CliResult<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out).map_err(|e| CliError::io(format!("listing {}", dir.display()), e))?;
    out.sort();
    Ok(out)
}
