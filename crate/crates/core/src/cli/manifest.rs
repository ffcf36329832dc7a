//! Run manifests and atomic file output.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{ConfigLayer, RunConfig};
use crate::error::Result;
use crate::eval::EvalReport;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Milliseconds since the Unix epoch.
pub fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Record of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Every resolved setting; feeding it back through `--config` repeats the run.
    pub config: ConfigLayer,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub artifacts: Vec<PathBuf>,
    pub reports: Vec<EvalReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn start(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            seed: cfg.train.seed,
            config: ConfigLayer::snapshot(cfg),
            started_unix_ms: unix_ms(),
            finished_unix_ms: 0,
            artifacts: Vec::new(),
            reports: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Stamps the end time and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix_ms = unix_ms();
        let path = dir.join(MANIFEST_FILE);
        write_atomic(&path, &serde_json::to_vec_pretty(&self)?)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}
