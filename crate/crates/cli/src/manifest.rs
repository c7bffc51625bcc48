//! The JSON record written next to every tracking run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use panotrack::config::config_text;
use panotrack::{Error, Result, TrackerConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// `dets`, `embeds`, `config`, `tracks` or `frames`.
    pub role: String,
    pub path: String,
    pub sha256: String,
}

impl Artifact {
    pub fn hash(role: &str, path: &Path) -> Result<Self> {
        Ok(Self {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: file_sha256(path)?,
        })
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_ms: u128,
    pub elapsed_ms: f64,
}

/// Config snapshot, seed, inputs and output hashes of one run.
///
/// `config` holds every key accepted by config files, so writing it back as
/// `key = value` lines reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub timing: Timing,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &TrackerConfig, started: SystemTime, elapsed: Duration) -> Self {
        let config = config_text(cfg)
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self {
            tool: "panotrack".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            seed: cfg.seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timing: Timing {
                started_unix_ms: started.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis()),
                elapsed_ms: elapsed.as_secs_f64() * 1e3,
            },
        }
    }

    pub fn input(&self, role: &str) -> Option<&Artifact> {
        self.inputs.iter().find(|a| a.role == role)
    }

    /// The config snapshot as config-file text.
    pub fn config_text(&self) -> String {
        self.config.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Input(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }
}
