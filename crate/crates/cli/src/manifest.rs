//! Per-directory record of what produced an output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use dada_core::config::{emit_config, KvConfig};
use dada_core::dataset::DatasetManifest;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

pub const ARTIFACT_VERSION: &str = concat!("dada-", env!("CARGO_PKG_VERSION"));

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: String,
    pub domain: String,
    pub seed: u64,
    pub count: usize,
    pub manifest_sha256: String,
}

impl DatasetRef {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| CliError::json(&path, e))?;
        Ok(Self {
            path: dir.display().to_string(),
            domain: format!("{:?}", m.style.domain).to_lowercase(),
            seed: m.seed,
            count: m.len(),
            manifest_sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed { exit_code: i32, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub args: Vec<String>,
    pub artifact_version: String,
    /// Resolved configuration text, keyed by role.
    pub configs: BTreeMap<String, String>,
    pub config_hashes: BTreeMap<String, String>,
    pub datasets: BTreeMap<String, DatasetRef>,
    pub seeds: Vec<u64>,
    pub params: BTreeMap<String, String>,
    pub deterministic: bool,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: RunStatus,
}

impl ExperimentManifest {
    pub fn new(command: &str, args: Vec<String>, deterministic: bool) -> Self {
        Self {
            command: command.to_string(),
            args,
            artifact_version: ARTIFACT_VERSION.to_string(),
            configs: BTreeMap::new(),
            config_hashes: BTreeMap::new(),
            datasets: BTreeMap::new(),
            seeds: Vec::new(),
            params: BTreeMap::new(),
            deterministic,
            started_unix: unix_now(),
            finished_unix: None,
            status: RunStatus::Running,
        }
    }

    pub fn with_config<C: KvConfig>(mut self, role: &str, cfg: &C) -> Self {
        let text = emit_config(cfg);
        self.config_hashes.insert(role.to_string(), sha256_hex(text.as_bytes()));
        self.configs.insert(role.to_string(), text);
        self
    }

    pub fn with_dataset(mut self, role: &str, dir: &Path) -> Result<Self> {
        self.datasets.insert(role.to_string(), DatasetRef::load(dir)?);
        Ok(self)
    }

    pub fn with_param(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    pub fn finish(&mut self, status: RunStatus) {
        self.finished_unix = Some(unix_now());
        self.status = status;
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::json(path, e))
}
