//! The `run_manifest.json` every subcommand leaves in its output directory.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, json_err, Result};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// SHA-256 of `config` serialized as compact JSON.
    pub config_hash: String,
    pub seed: u64,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    /// Fully resolved flags; valid as a `--config` file for `command`.
    pub config: serde_json::Value,
    /// Files written, relative to the output directory.
    pub artifacts: Vec<String>,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value, started_unix_s: f64, artifacts: Vec<String>) -> Self {
        let bytes = serde_json::to_vec(&config).expect("config serializes");
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: hex::encode(Sha256::digest(bytes)),
            seed,
            started_unix_s,
            finished_unix_s: unix_now(),
            config,
            artifacts,
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join(RUN_MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(json_err(&path))?;
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }

    pub fn read(out_dir: &Path) -> Result<Self> {
        let path = out_dir.join(RUN_MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(json_err(&path))
    }
}
