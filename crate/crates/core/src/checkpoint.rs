//! Checkpoint file format.
//!
//! Layout: magic `MFFD0001` (8 bytes), a little-endian u64 header length, a
//! UTF-8 JSON header, then raw little-endian tensor payloads in header
//! order. The header carries the run config, epoch counter, RNG states, and
//! per-tensor Adam step counts, so loading resumes training exactly where
//! saving left off.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{AdamSlot, AdamState, MoEFFDModel, Trainer};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MFFD0001";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeaderTensor {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamMeta {
    name: String,
    t: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    epoch: usize,
    data_rng: u64,
    noise_rng: u64,
    adam: Vec<AdamMeta>,
    tensors: Vec<HeaderTensor>,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

/// Serialize a trainer to the checkpoint byte layout.
pub fn encode<T: Scalar>(trainer: &Trainer<T>, config: &RunConfig) -> Result<Vec<u8>> {
    let dtype = T::DTYPE.name().to_string();
    let mut tensors: Vec<(String, Tensor<T>)> = Vec::new();
    trainer
        .model
        .for_each_param(&mut |name, t, _| tensors.push((name.to_string(), t.clone())));
    let mut adam_names: Vec<&String> = trainer.adam.slots.keys().collect();
    adam_names.sort();
    let mut adam_meta = Vec::with_capacity(adam_names.len());
    for name in adam_names {
        let slot = &trainer.adam.slots[name];
        adam_meta.push(AdamMeta {
            name: name.clone(),
            t: slot.t,
        });
        tensors.push((format!("adam.m.{name}"), slot.m.clone()));
        tensors.push((format!("adam.v.{name}"), slot.v.clone()));
    }
    let mut offset = 0u64;
    let mut header_tensors = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        header_tensors.push(HeaderTensor {
            name: name.clone(),
            dtype: dtype.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.len() * T::DTYPE.size_bytes()) as u64;
    }
    let header = Header {
        config: config.clone(),
        epoch: trainer.epoch,
        data_rng: trainer.data_rng.state(),
        noise_rng: trainer.noise_rng.state(),
        adam: adam_meta,
        tensors: header_tensors,
    };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| Error::Format(format!("header encode: {e}")))?;
    let mut out = Vec::with_capacity(16 + header_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(header_json.as_bytes());
    for (_, t) in &tensors {
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

/// Rebuild a trainer from checkpoint bytes.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Trainer<T>, RunConfig)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".to_string()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::Format("truncated checkpoint header".to_string()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;
    let mode = header.config.validate()?;
    let payload = &bytes[16 + header_len..];
    let expect_dtype = T::DTYPE.name();
    let mut loaded: HashMap<String, Tensor<T>> = HashMap::new();
    for ht in &header.tensors {
        if ht.dtype != expect_dtype {
            return Err(Error::Format(format!(
                "tensor `{}` is {}, expected {expect_dtype}",
                ht.name, ht.dtype
            )));
        }
        let n: usize = ht.shape.iter().product();
        let start = ht.offset as usize;
        let end = start + n * T::DTYPE.size_bytes();
        if end > payload.len() {
            return Err(Error::Format(format!(
                "tensor `{}` payload truncated",
                ht.name
            )));
        }
        let t = Tensor::from_le_bytes(ht.shape.clone(), &payload[start..end])
            .map_err(|e| Error::Format(format!("tensor `{}`: {e}", ht.name)))?;
        loaded.insert(ht.name.clone(), t);
    }
    let mut model = MoEFFDModel::<T>::init(&header.config.model)?;
    let mut missing = Vec::new();
    let mut result = Ok(());
    model.for_each_param_mut(&mut |name, value, _| {
        match loaded.remove(name) {
            Some(t) if t.shape() == value.shape() => *value = t,
            Some(t) => {
                result = Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    value.shape()
                )))
            }
            None => missing.push(name.to_string()),
        }
    });
    result?;
    if let Some(name) = missing.first() {
        return Err(Error::Format(format!("checkpoint missing tensor `{name}`")));
    }
    let mut adam = AdamState::new();
    for meta in &header.adam {
        let m = loaded
            .remove(&format!("adam.m.{}", meta.name))
            .ok_or_else(|| Error::Format(format!("missing adam.m.{}", meta.name)))?;
        let v = loaded
            .remove(&format!("adam.v.{}", meta.name))
            .ok_or_else(|| Error::Format(format!("missing adam.v.{}", meta.name)))?;
        adam.slots.insert(meta.name.clone(), AdamSlot { m, v, t: meta.t });
    }
    if let Some(name) = loaded.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{name}`")));
    }
    let mut trainer = Trainer::new(model, header.config.train.clone(), mode);
    trainer.adam = adam;
    trainer.data_rng = Stream::from_state(header.data_rng);
    trainer.noise_rng = Stream::from_state(header.noise_rng);
    trainer.epoch = header.epoch;
    Ok((trainer, header.config))
}

pub fn save<T: Scalar>(path: &Path, trainer: &Trainer<T>, config: &RunConfig) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, encode(trainer, config)?).map_err(|e| io_err(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Trainer<T>, RunConfig)> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode(&bytes)
}
