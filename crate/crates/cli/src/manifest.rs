//! Run manifests written next to every output file.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set so that
/// repeated runs can produce identical manifests.
pub fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
    {
        return t;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub struct Manifest {
    pub command: &'static str,
    pub scenario: Option<(String, String)>,
    pub inputs: Vec<(PathBuf, String)>,
    pub plan: Value,
    pub started: u64,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &'static str, plan: Value) -> Self {
        Self {
            command,
            scenario: None,
            inputs: vec![],
            plan,
            started: timestamp(),
            outputs: vec![],
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "tool": "odap",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "scenario": self.scenario.as_ref().map(|(source, hash)| json!({"source": source, "sha256": hash})),
            "inputs": self.inputs.iter().map(|(p, h)| json!({"path": p, "sha256": h})).collect::<Vec<_>>(),
            "plan": self.plan,
            "started_unix_s": self.started,
            "finished_unix_s": timestamp(),
            "outputs": self.outputs,
        })
    }

    /// Writes the manifest next to the first output.
    pub fn write(&self) -> Result<PathBuf> {
        let first = self.outputs.first().context("manifest has no outputs")?;
        let path = manifest_path(first);
        let text = serde_json::to_string_pretty(&self.to_json())? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Scenario hash recorded in the manifest next to `output`, if any.
pub fn recorded_scenario_hash(output: &Path) -> Result<Option<String>> {
    let path = manifest_path(output);
    if !path.exists() {
        return Ok(None);
    }
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(v.pointer("/scenario/sha256")
        .and_then(Value::as_str)
        .map(str::to_owned))
}
