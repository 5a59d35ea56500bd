//! Binary checkpoints.
//!
//! Layout: the magic `TRAJPRED1`, a little-endian `u32` header length, a JSON
//! header, then every tensor as little-endian `f32` in header order. The
//! header carries the full run configuration and vocabulary, so a checkpoint
//! alone rebuilds the model. Optimizer moments are not stored; each stage
//! starts a fresh optimizer.

use std::path::Path;

use ndcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamGroup;
use crate::text::TripletVocabulary;

pub const MAGIC: &[u8; 9] = b"TRAJPRED1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    pub dtype: String,
    pub group: ParamGroup,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Last completed stage; 0 for an untrained model.
    pub stage: u32,
    /// Updates completed within `stage`.
    pub step: usize,
    pub config_digest: String,
    pub config: RunConfig,
    pub vocab: TripletVocabulary,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub payload: Vec<u8>,
}

impl Checkpoint {
    pub fn capture(model: &Model, config: &RunConfig, stage: u32, step: usize) -> Self {
        let mut tensors = Vec::with_capacity(model.store.len());
        let mut payload = Vec::new();
        for (_, p) in model.store.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: payload.len(),
                dtype: "f32".into(),
                group: p.group,
                trainable: p.group.is_trainable(),
            });
            payload.extend_from_slice(&p.value.to_f32_le_bytes());
        }
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            stage,
            step,
            config_digest: config.digest(),
            config: config.clone(),
            vocab: model.vocab.clone(),
            tensors,
        };
        Self { header, payload }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing TRAJPRED1 magic"));
        }
        let len_at = MAGIC.len();
        let len = u32::from_le_bytes(bytes[len_at..len_at + 4].try_into().expect("4 bytes")) as usize;
        let start = len_at + 4;
        let header_bytes = bytes.get(start..start + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| Error::json("checkpoint header", e))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
        }
        let payload = bytes[start + len..].to_vec();
        let mut expected = 0;
        for t in &header.tensors {
            if t.dtype != "f32" {
                return Err(Error::Checkpoint(format!("`{}` has dtype {}", t.name, t.dtype)));
            }
            if t.offset != expected {
                return Err(Error::Checkpoint(format!("`{}` is not contiguous", t.name)));
            }
            if t.trainable != t.group.is_trainable() {
                return Err(Error::Checkpoint(format!("`{}` trainable flag contradicts its group", t.name)));
            }
            expected += 4 * t.shape.iter().product::<usize>();
        }
        if expected != payload.len() {
            return Err(Error::Checkpoint(format!("payload holds {} bytes, index needs {expected}", payload.len())));
        }
        Ok(Self { header, payload })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let t = self.header.tensors.iter().find(|t| t.name == name)?;
        let n = t.shape.iter().product::<usize>();
        Tensor::from_f32_le_bytes(t.shape.clone(), &self.payload[t.offset..t.offset + 4 * n]).ok()
    }

    /// Rebuilds the model and overwrites every parameter with the stored one.
    /// The stored index must match the architecture exactly.
    pub fn restore(&self) -> Result<Model> {
        let h = &self.header;
        if h.config.digest() != h.config_digest {
            return Err(Error::Checkpoint("config digest does not match the stored config".into()));
        }
        let mut model = Model::new(&h.config.model, &h.vocab, h.config.train.seed)?;
        if model.store.len() != h.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored tensors, model has {}",
                h.tensors.len(),
                model.store.len()
            )));
        }
        for entry in &h.tensors {
            let id = model
                .store
                .id(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", entry.name)))?;
            let p = model.store.get(id);
            if p.value.shape() != entry.shape.as_slice() || p.group != entry.group {
                return Err(Error::Checkpoint(format!("tensor `{}` does not match the architecture", entry.name)));
            }
            let value = self.tensor(&entry.name).expect("validated on load");
            *model.store.value_mut(id) = value;
        }
        Ok(model)
    }
}
