//! Per-run manifest, written atomically when a command finishes.

use std::path::Path;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::PathMap;
use icestack::Execution;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub command: String,
    /// Fully resolved configuration.
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: PathMap,
    pub outputs: PathMap,
    pub execution: Execution,
    pub code_version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seed: Option<u64>, execution: Execution) -> Self {
        RunManifest {
            manifest_version: MANIFEST_VERSION,
            command: command.to_string(),
            config,
            seed,
            inputs: PathMap::new(),
            outputs: PathMap::new(),
            execution,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: 0.0,
        }
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let found = v.get("manifest_version").and_then(Value::as_u64);
        if found != Some(MANIFEST_VERSION as u64) {
            bail!(icestack::Error::Version {
                found: found.unwrap_or(0) as u32,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        icestack::io::write_atomic(&out_dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(())
    }
}
