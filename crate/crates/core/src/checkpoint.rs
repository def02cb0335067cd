//! Binary tensor containers: model checkpoints (`DPFT`) and the shared
//! layout used by adapter plug-in files.
//!
//! Layout: 4 magic bytes, u32 version, u64 header length, a JSON header,
//! then the raw little-endian row-major tensor payloads back to back. The
//! header's manifest gives each tensor's name, shape, dtype, trainable flag,
//! byte offset into the payload and byte length.

use std::hash::Hasher;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::param::{ParamStore, Parameter};
use crate::tensor::{DType, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DPFT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub trainable: bool,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header<M> {
    meta: M,
    tensors: Vec<TensorEntry>,
}

/// Serializes `params` under `magic` with a typed metadata block.
pub(crate) fn encode<M: Serialize>(magic: [u8; 4], meta: &M, params: &[&Parameter], dtype: DType) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for p in params {
        let bytes = p.value.to_le_bytes(dtype);
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype,
            trainable: p.trainable,
            offset: payload.len() as u64,
            nbytes: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    let header = serde_json::to_vec(&Header { meta, tensors }).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses a container, returning its metadata and parameters in file order.
pub(crate) fn decode<M: for<'de> Deserialize<'de>>(magic: [u8; 4], bytes: &[u8]) -> Result<(M, Vec<Parameter>)> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Truncated(format!("{} bytes is shorter than the preamble", bytes.len())));
    }
    if bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let available = (bytes.len() - PREAMBLE) as u64;
    if header_len > available {
        return Err(Error::Truncated(format!("header claims {header_len} bytes but only {available} follow")));
    }
    let header_end = PREAMBLE + header_len as usize;
    let header: Header<M> =
        serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| Error::Format(format!("header: {e}")))?;
    let payload = &bytes[header_end..];
    let mut params = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let end = t.offset.checked_add(t.nbytes).filter(|&e| e <= payload.len() as u64).ok_or_else(|| {
            Error::Truncated(format!(
                "tensor `{}` spans bytes {}..{} of a {}-byte payload",
                t.name,
                t.offset,
                t.offset.saturating_add(t.nbytes),
                payload.len()
            ))
        })?;
        let value = Tensor::from_le_bytes(&t.shape, t.dtype, &payload[t.offset as usize..end as usize])?;
        params.push(Parameter::new(t.name, value, t.trainable));
    }
    Ok((header.meta, params))
}

/// 64-bit FNV-1a over the payload a checkpoint of `params` would contain.
pub fn fingerprint(params: &ParamStore, dtype: DType) -> u64 {
    let mut h = fnv::FnvHasher::default();
    for p in params.iter() {
        h.write(&p.value.to_le_bytes(dtype));
    }
    h.finish()
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let params: Vec<&Parameter> = model.params.iter().collect();
    encode(CHECKPOINT_MAGIC, &CheckpointMeta { config: model.config.clone() }, &params, model.config.dtype)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let (meta, loaded): (CheckpointMeta, _) = decode(CHECKPOINT_MAGIC, bytes)?;
    meta.config.validate()?;
    let plan = meta.config.param_plan();
    if plan.len() != loaded.len() {
        return Err(Error::Format(format!("checkpoint holds {} tensors, config implies {}", loaded.len(), plan.len())));
    }
    let mut params = ParamStore::new();
    for (want, p) in plan.iter().zip(loaded) {
        if want.name != p.name {
            return Err(Error::UnknownParameter(p.name));
        }
        if want.shape != p.value.shape() {
            return Err(Error::ParamShape {
                name: p.name,
                found: p.value.shape().to_vec(),
                expected: want.shape.clone(),
            });
        }
        params.insert(p)?;
    }
    Ok(Model { config: meta.config, params })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    model_from_bytes(&std::fs::read(path)?)
}

/// Copies checkpoint tensors into an existing model of the same layout,
/// keeping the model's own config and trainable flags.
pub fn load_into(model: &mut Model, path: impl AsRef<Path>) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let (_, loaded): (CheckpointMeta, Vec<Parameter>) = decode(CHECKPOINT_MAGIC, &bytes)?;
    for p in &loaded {
        let target = model.params.get(&p.name).ok_or_else(|| Error::UnknownParameter(p.name.clone()))?;
        if target.value.shape() != p.value.shape() {
            return Err(Error::ParamShape {
                name: p.name.clone(),
                found: p.value.shape().to_vec(),
                expected: target.value.shape().to_vec(),
            });
        }
    }
    for p in loaded {
        model.params.get_mut(&p.name).expect("checked above").value = p.value;
    }
    Ok(())
}
