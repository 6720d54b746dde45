//! Run manifest written alongside every command's outputs.

use serde::Serialize;
use std::path::Path;

/// Build identity from git describe, falling back to the package version.
pub const VERSION: &str = env!("GIT_DESCRIBE");

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Record of one invocation: what ran, with which settings, producing what.
/// Written before exit on both success and failure.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub version: String,
    pub wall_time_secs: f64,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config: serde_json::Value::Null,
            seed: 0,
            outputs: Vec::new(),
            version: VERSION.to_string(),
            wall_time_secs: 0.0,
            status: "incomplete".to_string(),
            error: None,
        }
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Best-effort write; a manifest failure must not mask the run's own exit code.
    pub fn write(&self, dir: &Path) {
        let attempt = || -> std::io::Result<()> {
            std::fs::create_dir_all(dir)?;
            let body = serde_json::to_string_pretty(self).expect("manifest serializes");
            std::fs::write(dir.join(MANIFEST_FILE), body)
        };
        if let Err(e) = attempt() {
            eprintln!("warning: could not write {}: {e}", dir.join(MANIFEST_FILE).display());
        }
    }
}
