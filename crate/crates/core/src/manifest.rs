//! Run manifests recorded next to every output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Everything needed to reproduce a run. Two manifests built from identical
/// inputs differ only in `started_at` / `finished_at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub template_hash: Option<String>,
    /// Backend identifiers; never credentials.
    pub backends: BTreeMap<String, String>,
    pub version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub outputs: BTreeMap<String, Value>,
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Compact UTC timestamp for directory names.
pub fn run_stamp() -> String {
    chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string()
}

/// Hex SHA-256 of a JSON value's canonical serialization.
pub fn config_hash(config: &Value) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(serde_json::to_vec(config).expect("json value serializes")))
}

/// Reads a TOML (by extension) or JSON file into a JSON value.
pub fn read_config_value(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str::<Value>(&text).map_err(|e| format!("{}: {e}", path.display()))
    } else {
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

impl RunManifest {
    pub fn start(subcommand: impl Into<String>, config: Value) -> Self {
        Self {
            subcommand: subcommand.into(),
            config,
            seeds: BTreeMap::new(),
            template_hash: None,
            backends: BTreeMap::new(),
            version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            started_at: now_rfc3339(),
            finished_at: None,
            outputs: BTreeMap::new(),
        }
    }

    pub fn seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn backend(mut self, role: &str, id: impl Into<String>) -> Self {
        self.backends.insert(role.to_string(), id.into());
        self
    }

    pub fn finish(&mut self) {
        self.finished_at = Some(now_rfc3339());
    }

    /// Copy with timestamps blanked, for reproducibility comparisons.
    pub fn without_timestamps(&self) -> Self {
        let mut m = self.clone();
        m.started_at.clear();
        m.finished_at = None;
        m
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n")
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_differ_only_in_timestamps() {
        let cfg = serde_json::json!({"k": 3, "grid": "adarank"});
        let mut a = RunManifest::start("evaluate", cfg.clone()).seed("run", 7).backend("ranker", "mock");
        std::thread::sleep(std::time::Duration::from_millis(5));
        let mut b = RunManifest::start("evaluate", cfg.clone()).seed("run", 7).backend("ranker", "mock");
        a.finish();
        b.finish();
        assert_ne!(a.started_at, b.started_at);
        assert_eq!(a.without_timestamps(), b.without_timestamps());
        assert_eq!(config_hash(&cfg), config_hash(&serde_json::json!({"grid": "adarank", "k": 3})));
    }

    #[test]
    fn config_files_in_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "seed = 3\ngrid = \"adarank\"\n").unwrap();
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"seed": 3, "grid": "adarank"}"#).unwrap();
        assert_eq!(read_config_value(&t).unwrap(), read_config_value(&j).unwrap());
    }
}
