use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{ModelSpec, Provenance};
use crate::error::{Error, Result};

/// Everything stored next to the weights of a saved network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub provenance: Provenance,
    pub config_hash: Option<String>,
    pub seed: u64,
    #[serde(default)]
    pub metrics_at_save: BTreeMap<String, f64>,
}

/// Weights (safetensors) plus a JSON sidecar at `<path>.json`.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    tensors: HashMap<String, Tensor>,
    source: Option<PathBuf>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".tmp");
    PathBuf::from(s)
}

/// Writes through a temporary file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub(crate) fn new(meta: CheckpointMeta, tensors: HashMap<String, Tensor>) -> Self {
        Self {
            meta,
            tensors,
            source: None,
        }
    }

    pub fn tensors(&self) -> &HashMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Path this checkpoint was loaded from, if any.
    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = tmp_path(path);
        candle_core::safetensors::save(&self.tensors, &tmp)?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        let meta = serde_json::to_vec_pretty(&self.meta)?;
        write_atomic(&sidecar_path(path), &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fail = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if !path.is_file() {
            return Err(fail("file not found".into()));
        }
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)
            .map_err(|e| fail(format!("unreadable weights: {e}")))?;
        let side = sidecar_path(path);
        let bytes = fs::read(&side).map_err(|e| fail(format!("missing metadata {}: {e}", side.display())))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&bytes).map_err(|e| fail(format!("corrupt metadata: {e}")))?;
        Ok(Self {
            meta,
            tensors,
            source: Some(path.to_path_buf()),
        })
    }
}
