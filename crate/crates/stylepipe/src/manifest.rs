//! Stage manifests: what a stage read, what it wrote, and under which config.
//!
//! A stage whose config fingerprint and input checksums match its manifest is
//! skipped, provided its outputs still carry the recorded checksums. An output
//! that changed on disk is an error rather than a silent rerun.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use stylepipe_core::util::file_sha256;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("checksum mismatch for {path}: recorded {expected}, found {found} (rerun with --force to regenerate)")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path} is recorded in a stage manifest but missing (rerun with --force to regenerate)")]
    Missing { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_fingerprint: String,
    /// Paths relative to the work directory, mapped to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub degraded: bool,
    #[serde(default)]
    pub notes: Vec<String>,
}

pub fn manifest_path(work: &Path, stage: &str) -> PathBuf {
    work.join("manifests").join(format!("{stage}.json"))
}

/// Key under which a file is recorded: relative to `work` when inside it.
pub fn file_key(work: &Path, path: &Path) -> String {
    path.strip_prefix(work)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

fn resolve_key(work: &Path, key: &str) -> PathBuf {
    let p = Path::new(key);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        work.join(p)
    }
}

pub fn checksums(work: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    files
        .iter()
        .map(|f| {
            let sum = file_sha256(f).with_context(|| format!("hashing {}", f.display()))?;
            Ok((file_key(work, f), sum))
        })
        .collect()
}

impl StageManifest {
    pub fn load(work: &Path, stage: &str) -> Result<Option<Self>> {
        let path = manifest_path(work, stage);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        Ok(Some(
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        ))
    }

    pub fn save(&self, work: &Path) -> Result<()> {
        let path = manifest_path(work, &self.stage);
        fs::create_dir_all(path.parent().expect("has parent"))?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(())
    }

    /// Fails on the first recorded output that is missing or changed.
    pub fn verify_outputs(&self, work: &Path) -> Result<(), ManifestError> {
        for (key, expected) in &self.outputs {
            let path = resolve_key(work, key);
            let found = match file_sha256(&path) {
                Ok(s) => s,
                Err(_) => return Err(ManifestError::Missing { path }),
            };
            if &found != expected {
                return Err(ManifestError::ChecksumMismatch {
                    path,
                    expected: expected.clone(),
                    found,
                });
            }
        }
        Ok(())
    }

    /// True when this manifest describes a run with the same config and inputs.
    pub fn matches(&self, fingerprint: &str, inputs: &BTreeMap<String, String>) -> bool {
        self.config_fingerprint == fingerprint && &self.inputs == inputs
    }
}
