//! Run manifests: everything needed to re-execute a command, plus digests
//! of what it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use latent_ct::FanBeamGeometry;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::Command;
use crate::config::RunConfig;

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: Command,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub geometry: FanBeamGeometry,
    pub code_version: String,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    /// sha256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every output file, keyed by its name inside `output_dir`.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn file_name(command: &Command) -> String {
        format!("{}.manifest.json", command.stem())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(Self::file_name(&self.command));
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// Output names whose digests differ from `other`'s (including files
    /// present in only one of them).
    pub fn digest_mismatches(&self, other: &RunManifest) -> Vec<String> {
        let mut names: Vec<&String> = self.outputs.keys().chain(other.outputs.keys()).collect();
        names.sort();
        names.dedup();
        names
            .into_iter()
            .filter(|n| self.outputs.get(*n) != other.outputs.get(*n))
            .cloned()
            .collect()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {} for its digest", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}
