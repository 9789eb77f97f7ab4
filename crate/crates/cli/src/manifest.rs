//! Per-command manifests: config hash, seed, input and artifact hashes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> CliResult<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path, shown_as: impl Into<String>) -> CliResult<Self> {
        Ok(FileHash {
            path: shown_as.into(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    /// Files written next to the manifest, by name.
    pub artifacts: Vec<FileHash>,
    pub timing: Timing,
}

impl Manifest {
    pub fn build(
        command: &str,
        cfg: &RunConfig,
        inputs: &[&Path],
        out_dir: &Path,
        artifacts: &[&str],
        elapsed_s: f64,
    ) -> CliResult<Self> {
        Ok(Manifest {
            command: command.to_string(),
            config_sha256: sha256_bytes(cfg.canonical_json().as_bytes()),
            seed: cfg.seed,
            inputs: inputs
                .iter()
                .map(|p| {
                    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    FileHash::of(p, name)
                })
                .collect::<CliResult<_>>()?,
            artifacts: artifacts
                .iter()
                .map(|name| FileHash::of(&out_dir.join(name), *name))
                .collect::<CliResult<_>>()?,
            timing: Timing { elapsed_s },
        })
    }

    pub fn write(&self, out_dir: &Path) -> CliResult<()> {
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    pub fn read(out_dir: &Path) -> CliResult<Self> {
        let path = out_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
