//! Run manifest: what ran, with which config, and what it wrote.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    /// Hash of the config used by the most recent stage.
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// `ok` or `failed`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seconds: f64,
    /// Files written by the stage, relative to the output directory.
    pub artifacts: Vec<String>,
    /// Stage-specific settings and summary values.
    #[serde(default)]
    pub details: serde_json::Value,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            seed,
            stages: BTreeMap::new(),
        }
    }

    /// Loads the manifest in `dir`, or starts a new one.
    pub fn load_or_new(dir: &Path, config_hash: &str, seed: u64) -> Result<Self, CliError> {
        let path = dir.join(FILE);
        let mut m = if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            serde_json::from_str(&text)?
        } else {
            RunManifest::new(config_hash, seed)
        };
        m.version = env!("CARGO_PKG_VERSION").to_string();
        m.config_hash = config_hash.to_string();
        m.seed = seed;
        Ok(m)
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    /// Every file listed by any stage, plus the manifest itself.
    pub fn artifacts(&self) -> Vec<String> {
        let mut out: Vec<String> = self.stages.values().flat_map(|s| s.artifacts.iter().cloned()).collect();
        out.push(FILE.to_string());
        out.sort();
        out.dedup();
        out
    }

    /// A copy with timings zeroed, for comparing reruns.
    pub fn without_timings(&self) -> Self {
        let mut m = self.clone();
        m.stages.values_mut().for_each(|s| s.seconds = 0.0);
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_listing() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("abc", 7);
        m.stages.insert(
            "screen".into(),
            StageRecord {
                config_hash: "abc".into(),
                status: "ok".into(),
                error: None,
                seconds: 1.5,
                artifacts: vec!["screening.csv".into()],
                details: serde_json::Value::Null,
                warnings: vec![],
            },
        );
        m.write(dir.path()).unwrap();
        let back = RunManifest::read(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.artifacts(), vec!["manifest.json".to_string(), "screening.csv".into()]);
        assert_eq!(back.without_timings().stages["screen"].seconds, 0.0);
    }
}
