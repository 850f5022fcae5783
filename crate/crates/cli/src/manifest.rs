//! Run manifests: every command writes one before its results, recording the
//! exact inputs (by digest), seed and output paths.

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub tool_version: String,
    pub root_seed: u64,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    /// Wall-clock timestamp; the only non-reproducible field of a run.
    pub created_unix_ms: u128,
}

#[derive(Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot read input {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(root_seed: u64, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputDigest {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunManifest {
            command: std::env::args().collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            root_seed,
            inputs,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            created_unix_ms: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
        })
    }

    /// Atomic write: the manifest lands before any result file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path, text.as_bytes())
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create directory {}", dir.display()))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    std::fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("cannot move {} into place", path.display()))?;
    Ok(())
}
