//! Versioned, self-describing stage checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use dap_models::ParamStore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive;
use crate::config::Stage;
use crate::error::{Result, RuntimeError};

const MAGIC: &[u8; 8] = b"DAPCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub stage: Stage,
    pub config_hash: String,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Stage configuration the weights were trained with.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<f32>,
}

impl Checkpoint {
    pub fn from_store(
        stage: Stage,
        config_hash: String,
        epoch: usize,
        metrics: BTreeMap<String, f64>,
        config: serde_json::Value,
        store: &ParamStore,
    ) -> Result<Self> {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        for (name, shape, values) in store.export()? {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: data.len(),
            });
            data.extend(values);
        }
        Ok(Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                stage,
                config_hash,
                epoch,
                metrics,
                config,
                tensors,
            },
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        archive::write(path, MAGIC, &self.header, &self.data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, data): (CheckpointHeader, Vec<f32>) = archive::read(path, MAGIC)?;
        let bad = |m: String| RuntimeError::Checkpoint {
            path: path.to_path_buf(),
            message: m,
        };
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let mut end = 0;
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            if t.offset != end || t.offset + n > data.len() {
                return Err(bad(format!("tensor {} lies outside the data block", t.name)));
            }
            end += n;
        }
        if end != data.len() {
            return Err(bad("trailing data".into()));
        }
        Ok(Checkpoint { header, data })
    }

    /// Loads `path` for `stage`, refusing a configuration-hash mismatch
    /// unless `allow_mismatch` is set.
    pub fn load_for(path: &Path, stage: Stage, config_hash: &str, allow_mismatch: bool) -> Result<Self> {
        if !path.exists() {
            return Err(RuntimeError::Dependency(format!(
                "no {stage} checkpoint at {}; run `dap train {stage}` first",
                path.display()
            )));
        }
        let ckpt = Self::load(path)?;
        let bad = |m: String| RuntimeError::Checkpoint {
            path: path.to_path_buf(),
            message: m,
        };
        if ckpt.header.stage != stage {
            return Err(bad(format!("holds {} weights, expected {stage}", ckpt.header.stage)));
        }
        if ckpt.header.config_hash != config_hash {
            if allow_mismatch {
                log::warn!("{}: configuration hash differs; loading anyway", path.display());
            } else {
                return Err(bad(format!(
                    "configuration hash {} does not match the current {stage} configuration {config_hash}",
                    ckpt.header.config_hash
                )));
            }
        }
        Ok(ckpt)
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        self.header
            .tensors
            .iter()
            .map(|t| {
                let n: usize = t.shape.iter().product();
                (t.name.clone(), t.shape.clone(), self.data[t.offset..t.offset + n].to_vec())
            })
            .collect()
    }

    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        store.import(&self.tensors())?;
        Ok(())
    }

    /// Hex SHA-256 of the parameter values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
