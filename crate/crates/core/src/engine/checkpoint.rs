//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `SEMCCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then the raw
//! little-endian tensor payload described by the header.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::Trainer;
use crate::error::{Result, SemcError};
use crate::mcrm::ContrastiveQueue;
use crate::model::ModelConfig;

pub const MAGIC: &[u8; 8] = b"SEMCCKPT";
pub const VERSION: u32 = 1;

const OPTIM_PREFIX: &str = "optim.velocity.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub epoch: usize,
    pub step: u64,
    pub best_f1: Option<f64>,
    pub queue: ContrastiveQueue,
    pub tensors: Vec<TensorMeta>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub params: BTreeMap<String, Tensor>,
    pub velocity: BTreeMap<String, Tensor>,
}

/// Hex SHA-256 of the model configuration's canonical JSON.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("model config serializes");
    hex::encode(Sha256::digest(json))
}

fn encode(t: &Tensor, out: &mut Vec<u8>) -> Result<String> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => {
            for v in flat.to_vec1::<f32>()? {
                out.extend_from_slice(&v.to_le_bytes());
            }
            Ok("f32".into())
        }
        DType::F64 => {
            for v in flat.to_vec1::<f64>()? {
                out.extend_from_slice(&v.to_le_bytes());
            }
            Ok("f64".into())
        }
        other => Err(SemcError::Checkpoint(format!(
            "unsupported dtype {other:?}"
        ))),
    }
}

fn decode(meta: &TensorMeta, payload: &[u8]) -> Result<Tensor> {
    let bytes = payload
        .get(meta.offset..meta.offset + meta.len)
        .ok_or_else(|| SemcError::Checkpoint(format!("tensor {} exceeds payload", meta.name)))?;
    let numel: usize = meta.shape.iter().product();
    let t = match meta.dtype.as_str() {
        "f32" if bytes.len() == numel * 4 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            Tensor::from_vec(v, meta.shape.as_slice(), &Device::Cpu)?
        }
        "f64" if bytes.len() == numel * 8 => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Tensor::from_vec(v, meta.shape.as_slice(), &Device::Cpu)?
        }
        d => {
            return Err(SemcError::Checkpoint(format!(
                "tensor {} has dtype {d} and {} bytes for shape {:?}",
                meta.name,
                bytes.len(),
                meta.shape
            )))
        }
    };
    Ok(t)
}

/// Writes model parameters, buffers, optimizer velocity, queue and
/// schedule position. The file is written to a sibling and renamed into
/// place.
pub fn save(path: &Path, trainer: &Trainer) -> Result<()> {
    let mut payload = Vec::new();
    let mut metas = Vec::new();
    let mut push = |name: String, t: &Tensor, payload: &mut Vec<u8>| -> Result<()> {
        let offset = payload.len();
        let dtype = encode(t, payload)?;
        metas.push(TensorMeta {
            name,
            dtype,
            shape: t.dims().to_vec(),
            offset,
            len: payload.len() - offset,
        });
        Ok(())
    };
    for (name, t) in trainer.model.store().snapshot()? {
        push(name, &t, &mut payload)?;
    }
    for (name, t) in trainer.optimizer.velocity() {
        push(format!("{OPTIM_PREFIX}{name}"), t, &mut payload)?;
    }
    let cfg = trainer.model.config();
    let header = Header {
        version: VERSION,
        config_hash: config_hash(cfg),
        model: cfg.clone(),
        epoch: trainer.epoch,
        step: trainer.step,
        best_f1: trainer.best_f1,
        queue: trainer.queue.clone(),
        tensors: metas,
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| SemcError::Checkpoint(format!("cannot serialize header: {e}")))?;
    let tmp = path.with_extension("ckpt.tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&payload)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| SemcError::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| SemcError::io(path, e))?;
    let bad = |m: &str| SemcError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!(
            "format version {version}, expected {VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| bad(&format!("malformed header: {e}")))?;
    if header.config_hash != config_hash(&header.model) {
        return Err(bad("config hash does not match the stored configuration"));
    }
    let payload = &bytes[20 + hlen..];
    let mut params = BTreeMap::new();
    let mut velocity = BTreeMap::new();
    for meta in &header.tensors {
        let t = decode(meta, payload)?;
        match meta.name.strip_prefix(OPTIM_PREFIX) {
            Some(name) => velocity.insert(name.to_string(), t),
            None => params.insert(meta.name.clone(), t),
        };
    }
    Ok(Checkpoint {
        header,
        params,
        velocity,
    })
}

/// Restores a checkpoint into `trainer`, whose model must have been built
/// from the same configuration.
pub fn load_into(path: &Path, trainer: &mut Trainer) -> Result<()> {
    let ckpt = read(path)?;
    let expected = config_hash(trainer.model.config());
    if ckpt.header.config_hash != expected {
        return Err(SemcError::Checkpoint(describe_mismatch(
            &ckpt.header.model,
            trainer.model.config(),
        )));
    }
    trainer.model.store().restore(&ckpt.params)?;
    let dtype = trainer.model.store().dtype();
    let velocity = ckpt
        .velocity
        .into_iter()
        .map(|(k, v)| Ok((k, v.to_dtype(dtype)?)))
        .collect::<Result<_>>()?;
    trainer.optimizer.set_velocity(velocity);
    trainer.queue = ckpt.header.queue;
    trainer.epoch = ckpt.header.epoch;
    trainer.step = ckpt.header.step;
    trainer.best_f1 = ckpt.header.best_f1;
    Ok(())
}

fn describe_mismatch(stored: &ModelConfig, current: &ModelConfig) -> String {
    let mut diffs = Vec::new();
    if stored.backbone.num_experts != current.backbone.num_experts {
        diffs.push(format!(
            "num_experts {} vs {}",
            stored.backbone.num_experts, current.backbone.num_experts
        ));
    }
    if stored.num_classes != current.num_classes {
        diffs.push(format!(
            "num_classes {} vs {}",
            stored.num_classes, current.num_classes
        ));
    }
    if diffs.is_empty() {
        diffs.push("model configuration differs".into());
    }
    format!("checkpoint does not match the model: {}", diffs.join(", "))
}
