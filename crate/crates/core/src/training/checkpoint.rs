//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "DIIACKPT"
//! version      u32
//! header_len   u64
//! header       header_len bytes of JSON (configs, epoch, seed state,
//!              frozen paths, tensor names and shapes in storage order)
//! tensors      f64 values of each tensor in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Modality, ModelConfig};
use crate::params::ParamTree;
use crate::tensor::Tensor;

use super::{TrainConfig, TrainMode};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DIIACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedState {
    pub seed: u64,
    pub epochs_completed: usize,
    pub adam_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamTree,
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Epoch at which this snapshot was taken (0 = before any update).
    pub epoch: usize,
    pub dev_accuracy: f64,
    pub seed_state: SeedState,
    pub distilled_text: bool,
    pub distilled_audio: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    train: TrainConfig,
    model: ModelConfig,
    epoch: usize,
    dev_accuracy: f64,
    seed_state: SeedState,
    distilled_text: bool,
    distilled_audio: bool,
    frozen: Vec<String>,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Whether the fusion block was trained (multimodal lineage).
    pub fn has_fusion(&self) -> bool {
        matches!(
            self.train.mode,
            TrainMode::Multimodal | TrainMode::DistillText | TrainMode::DistillAudio
        )
    }

    pub fn is_distilled(&self, modality: Modality) -> bool {
        match modality {
            Modality::Passage => self.distilled_text,
            Modality::Audio => self.distilled_audio,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            train: self.train.clone(),
            model: self.model.clone(),
            epoch: self.epoch,
            dev_accuracy: self.dev_accuracy,
            seed_state: self.seed_state,
            distilled_text: self.distilled_text,
            distilled_audio: self.distilled_audio,
            frozen: self.params.frozen().map(str::to_string).collect(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;

        let mut offset = 20 + header_len;
        let mut params = ParamTree::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| bad(format!("truncated data for `{}`", entry.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
            offset += 8 * n;
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
        }
        for path in &header.frozen {
            params.freeze(path)?;
        }
        Ok(Self {
            params,
            train: header.train,
            model: header.model,
            epoch: header.epoch,
            dev_accuracy: header.dev_accuracy,
            seed_state: header.seed_state,
            distilled_text: header.distilled_text,
            distilled_audio: header.distilled_audio,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
