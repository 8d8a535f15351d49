//! The run manifest: one JSON file per invocation, listing what was run and
//! what it wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::experiments::ExperimentOutcome;

pub const MANIFEST_SCHEMA: &str = "nanbu-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub experiment: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    /// Output files, relative to the manifest's directory.
    pub outputs: Vec<PathBuf>,
    pub summaries: Vec<ExperimentOutcome>,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(
        experiment: &str,
        config_hash: String,
        started_unix_ms: u128,
        summaries: Vec<ExperimentOutcome>,
    ) -> Self {
        let mut seeds: Vec<u64> = summaries
            .iter()
            .flat_map(|s| s.seeds.iter().copied())
            .collect();
        seeds.sort_unstable();
        seeds.dedup();
        let outputs = summaries
            .iter()
            .flat_map(|s| s.csv.iter().cloned())
            .collect();
        RunManifest {
            schema: MANIFEST_SCHEMA.to_string(),
            experiment: experiment.to_string(),
            config_hash,
            seeds,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms,
            finished_unix_ms: now_ms(),
            outputs,
            summaries,
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.schema != MANIFEST_SCHEMA {
            anyhow::bail!(
                "{}: unsupported manifest schema `{}`",
                path.display(),
                m.schema
            );
        }
        Ok(m)
    }
}
