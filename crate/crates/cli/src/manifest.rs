// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::Settings;

/// What a command read, wrote and with which settings; enough to rerun it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: String,
    pub config_path: Option<PathBuf>,
    pub artifact_root: PathBuf,
    pub config: Settings,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    /// Command-specific results (selected sites, record counts, ...).
    pub details: serde_json::Value,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, artifact_root: &Path, config: &Settings) -> Self {
        let h = &config.harness;
        let seeds = BTreeMap::from([
            ("corpus".to_string(), h.corpus.seed),
            ("lm".to_string(), h.lm.seed),
            ("probe".to_string(), h.probe.seed),
            ("linear_fit".to_string(), h.linear_fit.seed),
            ("eval".to_string(), h.eval_seed),
            ("generation".to_string(), h.generation_seed),
            ("optimizer".to_string(), config.optimizer.seed),
        ]);
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_path: config_path.map(Path::to_path_buf),
            artifact_root: artifact_root.to_path_buf(),
            config: config.clone(),
            seeds,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            details: serde_json::Value::Null,
            started_unix: now_unix(),
            finished_unix: 0.0,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.to_path_buf());
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.to_string(), path.to_path_buf());
    }

    /// `<file>.manifest.json` next to a file output, `manifest.json` inside a directory output.
    pub fn path_for(output: &Path) -> PathBuf {
        if output.is_dir() {
            output.join("manifest.json")
        } else {
            let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(".manifest.json");
            output.with_file_name(name)
        }
    }

    pub fn write(mut self, primary_output: &Path) -> cotsteer::Result<PathBuf> {
        self.finished_unix = now_unix();
        let path = Self::path_for(primary_output);
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}
