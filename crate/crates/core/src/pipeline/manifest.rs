use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::hashing::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactEntry {
    pub sha256: String,
    pub bytes: u64,
}

/// Content hashes of every artifact in a run directory, keyed by path
/// relative to that directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

fn read_file(dir: &Path, rel: &str) -> Result<Vec<u8>, PipelineError> {
    let path = dir.join(rel);
    fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PipelineError::MissingFile(path.display().to_string()),
        _ => PipelineError::Io(format!("{}: {e}", path.display())),
    })
}

impl DatasetManifest {
    pub fn new(config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Loads the manifest of `dir`, or starts an empty one when the
    /// directory has none yet. An existing manifest must belong to
    /// `config_hash`.
    pub fn open(dir: &Path, config_hash: &str) -> Result<Self, PipelineError> {
        let m = match Self::load(dir) {
            Err(PipelineError::MissingFile(_)) => return Ok(Self::new(config_hash)),
            other => other?,
        };
        if m.config_hash != config_hash {
            return Err(PipelineError::HashMismatch {
                path: dir.join(MANIFEST_FILE).display().to_string(),
                detail: format!(
                    "run directory was produced under config {}, current config is {}",
                    m.config_hash, config_hash
                ),
            });
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let bytes = read_file(dir, MANIFEST_FILE)?;
        serde_json::from_slice(&bytes).map_err(|e| {
            PipelineError::Data(format!("{}: {e}", dir.join(MANIFEST_FILE).display()))
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        fs::write(dir.join(MANIFEST_FILE), s)
            .map_err(|e| PipelineError::Io(format!("{}: {e}", dir.display())))
    }

    /// Hashes `rel` as it is on disk now and records it.
    pub fn record(&mut self, dir: &Path, rel: &str) -> Result<(), PipelineError> {
        let bytes = read_file(dir, rel)?;
        self.artifacts.insert(
            rel.to_string(),
            ArtifactEntry {
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    /// Reads `rel` after checking it against its recorded hash.
    pub fn read_verified(&self, dir: &Path, rel: &str) -> Result<Vec<u8>, PipelineError> {
        let path = dir.join(rel).display().to_string();
        let entry = self.artifacts.get(rel).ok_or_else(|| PipelineError::HashMismatch {
            path: path.clone(),
            detail: "not recorded in the manifest; run the producing stage first".into(),
        })?;
        let bytes = read_file(dir, rel)?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(PipelineError::HashMismatch {
                path,
                detail: format!("expected sha256 {}, found {}", entry.sha256, actual),
            });
        }
        Ok(bytes)
    }
}

/// Checks every recorded artifact; reports the first missing or altered
/// file in path order.
pub fn validate_manifest(dir: &Path) -> Result<DatasetManifest, PipelineError> {
    let m = DatasetManifest::load(dir)?;
    for rel in m.artifacts.keys() {
        m.read_verified(dir, rel)?;
    }
    Ok(m)
}
