//! Run manifests: a config snapshot plus provenance, written into the run
//! directory before training starts and finalized afterwards. The snapshot
//! round-trips to an identical `TrainConfig`, so a manifest is sufficient
//! to reproduce its run byte for byte.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use aopd_core::trainer::TrainConfig;

use crate::CliError;

/// Relative output paths inside a run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub metrics: String,
    pub advantage_hist: String,
    pub final_policy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<String>,
}

impl Default for RunOutputs {
    fn default() -> Self {
        Self {
            metrics: "metrics.csv".into(),
            advantage_hist: "advantage_hist.csv".into(),
            final_policy: "final_policy.txt".into(),
            trajectories: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub started_unix: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_unix: Option<u64>,
    /// Set when `--seed` overrode the config's seeds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_override: Option<u64>,
    pub outputs: RunOutputs,
    pub config: TrainConfig,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(config: TrainConfig, seed_override: Option<u64>, outputs: RunOutputs) -> Self {
        Self {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: unix_now(),
            finished_unix: None,
            seed_override,
            outputs,
            config,
        }
    }

    pub fn mark_finished(&mut self) {
        self.finished_unix = Some(unix_now());
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("manifest serialization: {e}")))?;
        std::fs::write(dir.join("manifest.toml"), text)
            .map_err(|e| CliError::Runtime(format!("writing manifest: {e}")))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(dir.join("manifest.toml"))
            .map_err(|e| CliError::Config(format!("reading manifest: {e}")))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("parsing manifest: {e}")))
    }
}
