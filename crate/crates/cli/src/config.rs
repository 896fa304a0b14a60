//! JSON config files, `--set key=value` overrides and manifest replay.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::manifest::RunManifest;

/// A resolved command configuration plus the manifest it came from, if any.
pub struct Loaded<T> {
    pub config: T,
    pub replay: Option<RunManifest>,
}

impl<T> Loaded<T> {
    /// Explicit path, else the one recorded in the replayed manifest.
    pub fn input(&self, arg: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        if let Some(p) = arg {
            return Ok(p.clone());
        }
        match self.replay.as_ref().and_then(|m| m.inputs.get(name)) {
            Some(p) => Ok(p.clone()),
            None => bail!(crate::UsageError(format!(
                "missing --{}",
                name.replace('_', "-")
            ))),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| icestack::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
        .map_err(Into::into)
}

/// Overlay `src` onto `dst`. Every key in `src` must already exist in
/// `dst` unless `dst` holds `null` there.
fn merge(dst: &mut Value, src: Value, at: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let here = if at.is_empty() {
                    k.clone()
                } else {
                    format!("{at}.{k}")
                };
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => bail!(crate::UsageError(format!("unknown config key `{here}`"))),
                }
            }
        }
        (slot, v) => *slot = v,
    }
    Ok(())
}

fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!(crate::UsageError(format!(
            "--set expects key=value, got `{assignment}`"
        )));
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut nested = value;
    for part in key.rsplit('.') {
        let mut obj = serde_json::Map::new();
        obj.insert(part.to_string(), nested);
        nested = Value::Object(obj);
    }
    merge(root, nested, "")
}

/// Defaults, then the config file (or a manifest's snapshot), then `--set`.
pub fn load<T: Serialize + DeserializeOwned + Default>(
    command: &str,
    path: Option<&Path>,
    sets: &[String],
) -> Result<Loaded<T>> {
    let mut root = serde_json::to_value(T::default())?;
    let mut replay = None;
    if let Some(path) = path {
        let text = read_text(path)?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| crate::UsageError(format!("{}: {e}", path.display())))?;
        let body = if file.get("manifest_version").is_some() {
            let m = RunManifest::from_value(file)
                .with_context(|| format!("reading manifest {}", path.display()))?;
            if m.command != command {
                bail!(crate::UsageError(format!(
                    "{} records a `{}` run, not `{command}`",
                    path.display(),
                    m.command
                )));
            }
            let snapshot = m.config.clone();
            replay = Some(m);
            snapshot
        } else {
            file
        };
        merge(&mut root, body, "")?;
    }
    for s in sets {
        apply_set(&mut root, s)?;
    }
    let config = serde_json::from_value(root)
        .map_err(|e| crate::UsageError(format!("invalid config: {e}")))?;
    Ok(Loaded { config, replay })
}

/// Config snapshot for a manifest.
pub fn snapshot<T: Serialize>(config: &T) -> Value {
    serde_json::to_value(config).unwrap_or(Value::Null)
}

pub type PathMap = BTreeMap<String, PathBuf>;
