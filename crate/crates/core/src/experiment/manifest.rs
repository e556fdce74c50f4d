//! Run manifest with per-stage artifact hashes, and the output-dir lock.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::checkpoint::{read_json, write_atomic};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
const LOCK_FILE: &str = ".lock";

/// A file below the output directory and its content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub software_version: String,
    pub stages: Vec<StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.to_path_buf(),
                reason: "file not found".into(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        RunManifest {
            config_hash: config_hash.to_string(),
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            stages: Vec::new(),
        }
    }

    /// The manifest under `root`, or a fresh one when none exists. A
    /// manifest from another config is discarded.
    pub fn load_or_new(root: &Path, config_hash: &str) -> Result<Self> {
        let path = root.join(RUN_MANIFEST_FILE);
        if !path.exists() {
            return Ok(RunManifest::new(config_hash));
        }
        let m: RunManifest = read_json(&path)?;
        if m.config_hash != config_hash {
            return Ok(RunManifest::new(config_hash));
        }
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        write_atomic(&root.join(RUN_MANIFEST_FILE), &serde_json::to_vec_pretty(self)?)
    }

    /// Hashes the given files and records them under `stage`, replacing an
    /// earlier record of the same stage.
    pub fn record(
        &mut self,
        root: &Path,
        stage: &str,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<()> {
        let refs = |paths: &[PathBuf]| -> Result<Vec<ArtifactRef>> {
            paths
                .iter()
                .map(|p| {
                    Ok(ArtifactRef {
                        path: relative(root, p),
                        sha256: sha256_file(p)?,
                    })
                })
                .collect()
        };
        let rec = StageRecord {
            stage: stage.to_string(),
            inputs: refs(inputs)?,
            outputs: refs(outputs)?,
        };
        self.stages.retain(|s| s.stage != stage);
        self.stages.push(rec);
        Ok(())
    }

    pub fn stage(&self, stage: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    /// Checks that every output of `stage` exists and still hashes the same.
    pub fn verify_stage(&self, root: &Path, stage: &str) -> Result<()> {
        let rec = self.stage(stage).ok_or_else(|| Error::MissingArtifact {
            path: root.join(RUN_MANIFEST_FILE),
            reason: format!("stage `{stage}` has not been run for this config"),
        })?;
        for a in &rec.outputs {
            let p = root.join(&a.path);
            let h = sha256_file(&p)?;
            if h != a.sha256 {
                return Err(Error::CorruptCheckpoint {
                    path: p,
                    reason: format!("content hash {h} differs from recorded {}", a.sha256),
                });
            }
        }
        Ok(())
    }
}

/// Exclusive writer lock on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::InvalidInput(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                root.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
