//! Run manifests: everything needed to rerun a command and check that the
//! rerun produced the same bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRecord {
    /// Input role (`data`, `input`, ...) or empty for outputs.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub role: String,
    /// Absolute for inputs, relative to the output directory for outputs.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Resolved configuration as TOML, with command-line overrides applied.
    pub config: String,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

/// SHA-256 of a file, or of the sorted `name:hash` lines of the files in a
/// directory.
pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    if path.is_dir() {
        let mut entries: Vec<_> =
            std::fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
        entries.sort();
        let mut h = Sha256::new();
        for p in entries {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            h.update(format!("{name}:{}\n", sha256_file(&p)?));
        }
        return Ok(hex::encode(h.finalize()));
    }
    let bytes = std::fs::read(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid manifest: {e}")))
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Internal(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}
