//! `GCDLAB-CKPT-1` checkpoint files.
//!
//! A checkpoint is a JSON object:
//!
//! ```json
//! {"magic": "GCDLAB-CKPT-1",
//!  "meta": {...},
//!  "tensors": [{"name": "enc.w", "shape": [35, 32], "values": [...]}, ...]}
//! ```
//!
//! `values` are row-major and written with shortest round-trip formatting,
//! so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "GCDLAB-CKPT-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    magic: String,
    #[serde(default)]
    meta: serde_json::Map<String, serde_json::Value>,
    tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn extend(&mut self, named: Vec<(String, Tensor)>) {
        self.tensors.extend(named);
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            magic: CHECKPOINT_MAGIC.to_string(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| NamedTensor {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.magic != CHECKPOINT_MAGIC {
            return Err(Error::InvalidInput(format!(
                "bad checkpoint magic {:?}, expected {CHECKPOINT_MAGIC:?}",
                file.magic
            )));
        }
        let tensors = file
            .tensors
            .into_iter()
            .map(|nt| Tensor::new(nt.shape, nt.values).map(|t| (nt.name, t)))
            .collect::<Result<_>>()?;
        Ok(Checkpoint { meta: file.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Format { path: path.to_path_buf(), detail: j.to_string() },
            other => other,
        })
    }
}
