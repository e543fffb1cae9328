//! The run manifest: everything needed to re-run a training directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use seed_core::train::TrainConfig;

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

pub fn build_id() -> String {
    format!("{} {} ({})", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"), env!("SEED_GIT_REV"))
}

/// File names inside a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub metrics: String,
    pub checkpoints: String,
    pub buffer: Option<String>,
}

impl Layout {
    pub fn new(save_buffer: bool) -> Self {
        Self {
            metrics: "metrics.jsonl".into(),
            checkpoints: "checkpoints".into(),
            buffer: save_buffer.then(|| "buffer.jsonl".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub build: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    /// Teacher checkpoint for the Q-threshold oracle.
    pub oracle_checkpoint: Option<PathBuf>,
    pub layout: Layout,
}

impl RunManifest {
    pub fn new(config: TrainConfig, oracle_checkpoint: Option<PathBuf>, save_buffer: bool) -> Self {
        Self {
            version: MANIFEST_VERSION,
            build: build_id(),
            seed: config.seed,
            config_hash: config.hash(),
            config,
            oracle_checkpoint,
            layout: Layout::new(save_buffer),
        }
    }

    /// Writes the manifest read-only; fails if `dir` already has one.
    pub fn create(&self, dir: &Path) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let mut file = std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => {
                    CliError::Config(format!("{} already holds a run manifest", dir.display()))
                }
                _ => e.into(),
            })?;
        file.write_all(serde_json::to_string_pretty(self)?.as_bytes())?;
        file.write_all(b"\n")?;
        let mut perms = file.metadata()?.permissions();
        perms.set_readonly(true);
        file.set_permissions(perms)?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(CliError::Config(format!("unsupported manifest version {}", m.version)));
        }
        if m.config.hash() != m.config_hash {
            return Err(CliError::Config("manifest config does not match its recorded hash".into()));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrips_and_is_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new(TrainConfig::default(), None, true);
        m.create(dir.path()).unwrap();
        assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
        assert!(matches!(m.create(dir.path()), Err(CliError::Config(_))));
        let meta = std::fs::metadata(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(meta.permissions().readonly());
    }
}
