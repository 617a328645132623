//! Run manifests: everything needed to repeat a run, written before it starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::train::{Arm, TrainConfig};
use crate::{Error, Result};

pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// `teacher` or an arm name.
    pub role: String,
    pub arm: Option<Arm>,
    pub seed: u64,
    pub build: String,
    pub config: TrainConfig,
    pub corpus: CorpusInfo,
    pub teacher: Option<PathBuf>,
    pub outputs: RunOutputs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub path: Option<PathBuf>,
    pub bytes: usize,
    pub train_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub manifest: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        RunOutputs {
            manifest: dir.join("manifest.json"),
            metrics: dir.join("metrics.csv"),
            checkpoint: dir.join("checkpoint.tq58"),
        }
    }
}

impl RunManifest {
    pub fn write(&self) -> Result<()> {
        let path = &self.outputs.manifest;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
