//! Run-directory manifest: everything needed to repeat a run bit for bit.
//!
//! Schema (JSON object):
//!
//! - `tool`, `version`: program name and crate version
//! - `command`: `run` or `compare`
//! - `methods`: method names, in run order
//! - `protocol`: `{q1, q2, order_seed, mode}`
//! - `policy`: `{zeta, r_max}` for the truncated learner
//! - `ridge`: ridge baseline settings
//! - `lift`: `null` or `{input_dim, output_dim, seed}` plus `generator`
//! - `train`, `test`: `{path, digest}`, digest is FNV-1a 64 of the whole file in hex
//! - `planted`: `null` or the planted-model files used by `bounds`
//! - `track_train_mse`: whether per-task training MSE was computed
//! - `outputs`: file names written into the run directory

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::RidgeConfig;
use crate::error::{Error, Result};
use crate::harness::Protocol;
use crate::io::file_digest;
use crate::lift::{EmbeddingConfig, EMBEDDING_GENERATOR};
use crate::solver::TruncationPolicy;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: PathBuf,
    pub digest: String,
}

impl FileRef {
    pub fn of(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let abs = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        Ok(Self {
            digest: file_digest(path)?,
            path: abs,
        })
    }

    /// Fails when the file changed since the manifest was written.
    pub fn verify(&self) -> Result<()> {
        let now = file_digest(&self.path)?;
        if now != self.digest {
            return Err(Error::Config(format!(
                "{} changed since the run (digest {now}, recorded {})",
                self.path.display(),
                self.digest
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftRecord {
    #[serde(flatten)]
    pub config: EmbeddingConfig,
    pub generator: String,
}

impl LiftRecord {
    pub fn new(config: EmbeddingConfig) -> Self {
        Self {
            config,
            generator: EMBEDDING_GENERATOR.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRecord {
    pub sidecar: FileRef,
    pub train_targets: FileRef,
    pub test_targets: FileRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub methods: Vec<String>,
    pub protocol: Protocol,
    pub policy: TruncationPolicy,
    pub ridge: RidgeConfig,
    pub lift: Option<LiftRecord>,
    pub train: FileRef,
    pub test: FileRef,
    pub planted: Option<PlantedRecord>,
    pub track_train_mse: bool,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let p = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
