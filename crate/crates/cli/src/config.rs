// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layered settings: built-in defaults, then a TOML file, then flags.
//!
//! The file may set any subset of keys, e.g.
//!
//! ```toml
//! strength = 1.0
//!
//! [harness.corpus]
//! n_problems = 500
//! seed = 7
//!
//! [harness.lm]
//! epochs = 60
//!
//! [optimizer]
//! lambda = 0.01
//! tau = 0.9
//! ```
//!
//! Unknown keys are rejected so typos do not silently fall back to defaults.

use std::path::Path;

use cotsteer::optimizer::OptimizerConfig;
use cotsteer::pipeline::HarnessConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub harness: HarnessConfig,
    pub optimizer: OptimizerConfig,
    /// Control-vector strength for the additive baselines.
    pub strength: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            harness: HarnessConfig::default(),
            optimizer: OptimizerConfig::default(),
            strength: 1.0,
        }
    }
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        if !path.exists() {
            return Err(CliError::Core(cotsteer::Error::MissingArtifact(path.to_path_buf())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Core(e.into()))?;
        Self::from_toml(&text).map_err(|m| CliError::Usage(format!("config {}: {m}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| e.to_string())?;
        merge(&mut base, overlay, "")?;
        toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| e.to_string())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.harness.corpus.validate()?;
        self.optimizer.validate()?;
        let h = &self.harness;
        if !(h.top_fraction > 0.0 && h.top_fraction <= 1.0) {
            return Err(CliError::Usage(format!("--top-fraction must be in (0, 1], got {}", h.top_fraction)));
        }
        if !(h.probe_holdout > 0.0 && h.probe_holdout < 1.0) {
            return Err(CliError::Usage(format!("--holdout must be in (0, 1), got {}", h.probe_holdout)));
        }
        if !self.strength.is_finite() {
            return Err(CliError::Usage("--strength must be finite".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table, prefix: &str) -> Result<(), String> {
    for (key, value) in overlay {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (base.get_mut(&key), value) {
            (None, _) => return Err(format!("unknown key `{path}`")),
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &path)?,
            (Some(toml::Value::Table(_)), _) => return Err(format!("`{path}` must be a table")),
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}
