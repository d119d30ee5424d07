//! Binary checkpoint: `TRIMKV01`, a little-endian u64 header length, a JSON
//! header (`config` plus a tensor manifest), then little-endian f32 payload.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CheckpointError, Error, Result};
use crate::gates::GateParams;
use crate::model::{Model, ModelConfig, ModelWeights};
use crate::numkern::Tensor;
use crate::tasks::TaskSpec;

use super::config::{Stage, TrainConfig};

pub const MAGIC: &[u8; 8] = b"TRIMKV01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: Value,
    tensors: Vec<ManifestEntry>,
}

pub fn encode_checkpoint(config: &Value, tensors: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        let nbytes = 4 * t.len();
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let header = serde_json::to_vec_pretty(&Header {
        config: config.clone(),
        tensors: manifest,
    })
    .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Value, Vec<(String, Tensor<f32>)>), CheckpointError> {
    let truncated = |needed: usize| CheckpointError::Truncated {
        needed,
        available: bytes.len(),
    };
    if bytes.len() < 8 {
        return Err(truncated(8));
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    if bytes.len() < 16 {
        return Err(truncated(16));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .ok_or(CheckpointError::Manifest("header length overflows".into()))?;
    if bytes.len() < payload_start {
        return Err(truncated(payload_start));
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let payload = &bytes[payload_start..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.nbytes != 4 * numel {
            return Err(CheckpointError::Manifest(format!(
                "{}: shape {:?} needs {} bytes, manifest says {}",
                e.name,
                e.shape,
                4 * numel,
                e.nbytes
            )));
        }
        let end = e.offset.saturating_add(e.nbytes);
        if end > payload.len() {
            return Err(CheckpointError::Truncated {
                needed: payload_start.saturating_add(end),
                available: bytes.len(),
            });
        }
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Manifest(err.to_string()))?;
        tensors.push((e.name, t));
    }
    Ok((header.config, tensors))
}

pub fn save_checkpoint(path: &Path, config: &Value, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    let bytes = encode_checkpoint(config, tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Value, Vec<(String, Tensor<f32>)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}

/// Header stored in a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub step: usize,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub task: Option<TaskSpec>,
}

/// Base weights plus, after the gate stage, one gate per layer.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model<f32>,
    pub gates: Option<Vec<GateParams<f32>>>,
}

fn take(by_name: &mut HashMap<String, Tensor<f32>>, name: String, dst: &mut Tensor<f32>) -> Result<()> {
    let t = by_name
        .remove(&name)
        .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
    if t.shape() != dst.shape() {
        return Err(CheckpointError::Manifest(format!(
            "{name}: stored shape {:?}, model expects {:?}",
            t.shape(),
            dst.shape()
        ))
        .into());
    }
    *dst = t;
    Ok(())
}

fn gate_tensor_name(layer: usize, part: &str) -> String {
    format!("gates.{layer}.{part}")
}

impl Checkpoint {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = self.model.weights.named();
        for (l, g) in self.gates.iter().flatten().enumerate() {
            out.extend(g.tensors().into_iter().map(|(part, t)| (gate_tensor_name(l, part), t)));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_value(&self.meta).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        encode_checkpoint(&config, &self.named_tensors())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, tensors) = decode_checkpoint(bytes)?;
        let meta: CheckpointMeta =
            serde_json::from_value(config).map_err(|e| CheckpointError::Manifest(format!("config: {e}")))?;
        meta.model.validate()?;
        let mut by_name: HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
        // Skeletons fixing names and shapes; every tensor is then overwritten.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut weights = ModelWeights::init(&meta.model, &mut rng)?.zeros_like();
        for (name, dst) in weights.named_mut() {
            take(&mut by_name, name, dst)?;
        }
        let has_gates = by_name.keys().any(|k| k.starts_with("gates."));
        let gates = if has_gates {
            let mut gates = Vec::with_capacity(meta.model.n_layers);
            for l in 0..meta.model.n_layers {
                let mut g = GateParams::init(&meta.model.gate, meta.model.d_model, meta.model.n_kv_heads, &mut rng)?;
                let parts: Vec<&'static str> = g.tensors().into_iter().map(|(p, _)| p).collect();
                for (part, dst) in parts.into_iter().zip(g.tensors_mut()) {
                    take(&mut by_name, gate_tensor_name(l, part), dst)?;
                }
                gates.push(g);
            }
            Some(gates)
        } else {
            None
        };
        if let Some(extra) = by_name.keys().next() {
            return Err(CheckpointError::Manifest(format!("unexpected tensor {extra:?}")).into());
        }
        let model = Model::new(meta.model.clone(), weights)?;
        Ok(Checkpoint { meta, model, gates })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn gates(&self) -> Result<&[GateParams<f32>]> {
        self.gates
            .as_deref()
            .ok_or_else(|| Error::Config("checkpoint has no retention gates; run train-gates first".into()))
    }
}
