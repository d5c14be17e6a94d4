//! Binary checkpoint: `"CODA"`, u32 version, u32 metadata length, u64
//! payload length, JSON metadata, little-endian f32 payload, CRC32 of
//! everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EngineError, TrainConfig, TrainState};
use crate::model::ModelConfig;
use crate::rng::{Stream, StreamState};
use crate::savpt::Footprint;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CODA";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated: {got} bytes, expected {expected}")]
    Truncated { got: usize, expected: usize },
    #[error("checkpoint has {0} trailing bytes")]
    Trailing(usize),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("bad metadata: {0}")]
    Meta(String),
    #[error("tensor `{name}`: {msg}")]
    Tensor { name: String, msg: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    pub iter: u64,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub rng: StreamState,
    pub footprints: Vec<Footprint>,
    pub adam_steps: Vec<(String, u64)>,
    pub tensors: Vec<TensorEntry>,
}

fn named_tensors(state: &TrainState) -> Vec<(String, &Tensor)> {
    let mut out = vec![];
    for (n, t) in state.student.tensors() {
        out.push((format!("student.{n}"), t));
    }
    for (n, t) in state.teacher.tensors() {
        out.push((format!("teacher.{n}"), t));
    }
    for (n, t) in state.frozen_encoder.iter() {
        out.push((format!("frozen.{n}"), t));
    }
    out
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut tensors: Vec<(String, Vec<usize>, &[f32])> = named_tensors(state)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.data()))
        .collect();
    for (n, st) in &state.moments {
        tensors.push((format!("adam.m.{n}"), vec![st.m.len()], &st.m));
        tensors.push((format!("adam.v.{n}"), vec![st.v.len()], &st.v));
    }
    let meta = CheckpointMeta {
        config_hash: state.config_hash.clone(),
        seed: state.seed,
        iter: state.iter,
        train: state.cfg.clone(),
        model: state.student.cfg.clone(),
        rng: state.rng.state(),
        footprints: state.student.prompts.footprints.clone(),
        adam_steps: state.moments.iter().map(|(n, s)| (n.clone(), s.step)).collect(),
        tensors: tensors
            .iter()
            .map(|(n, s, _)| TensorEntry {
                name: n.clone(),
                shape: s.clone(),
            })
            .collect(),
    };
    let meta_json = serde_json::to_vec(&meta).expect("metadata serializes");
    let payload_len: usize = tensors.iter().map(|(_, _, d)| d.len() * 4).sum();
    let mut buf = Vec::with_capacity(HEADER + meta_json.len() + payload_len + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(payload_len as u64).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    for (_, _, d) in &tensors {
        for v in d.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Validate framing and checksum; returns metadata and the payload slice.
pub fn parse(bytes: &[u8]) -> Result<(CheckpointMeta, &[u8]), CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated {
            got: bytes.len(),
            expected: HEADER,
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER {
        return Err(CheckpointError::Truncated {
            got: bytes.len(),
            expected: HEADER,
        });
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let found = u32_at(4);
    if found != VERSION {
        return Err(CheckpointError::Version { found });
    }
    let meta_len = u32_at(8) as usize;
    let payload_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected = HEADER + meta_len + payload_len + 4;
    if bytes.len() < expected {
        return Err(CheckpointError::Truncated {
            got: bytes.len(),
            expected,
        });
    }
    if bytes.len() > expected {
        return Err(CheckpointError::Trailing(bytes.len() - expected));
    }
    let body = &bytes[..expected - 4];
    let stored = u32_at(expected - 4);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let meta: CheckpointMeta =
        serde_json::from_slice(&bytes[HEADER..HEADER + meta_len]).map_err(|e| CheckpointError::Meta(e.to_string()))?;
    Ok((meta, &bytes[HEADER + meta_len..expected - 4]))
}

pub fn decode(bytes: &[u8]) -> Result<TrainState, CheckpointError> {
    let (meta, payload) = parse(bytes)?;
    let mut state = TrainState::new(&meta.model, meta.train.clone(), meta.seed)?;
    state.iter = meta.iter;
    state.config_hash = meta.config_hash.clone();
    state.rng = Stream::restore(&meta.rng).ok_or_else(|| CheckpointError::Meta("bad rng state".into()))?;
    state.student.prompts.footprints = meta.footprints.clone();
    state.teacher.prompts.footprints = meta.footprints.clone();

    let total: usize = meta.tensors.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
    if total != payload.len() {
        return Err(CheckpointError::Meta(format!(
            "payload {} bytes, tensors need {total}",
            payload.len()
        )));
    }
    let mut values = std::collections::HashMap::new();
    let mut off = 0;
    for e in &meta.tensors {
        let n: usize = e.shape.iter().product();
        let data: Vec<f32> = payload[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += 4 * n;
        values.insert(e.name.as_str(), (e.shape.clone(), data));
    }
    let mut take = |name: String, expect: &[usize]| -> Result<Vec<f32>, CheckpointError> {
        let (shape, data) = values.remove(name.as_str()).ok_or_else(|| CheckpointError::Tensor {
            name: name.clone(),
            msg: "missing".into(),
        })?;
        if shape != expect {
            return Err(CheckpointError::Tensor {
                name,
                msg: format!("shape {shape:?}, config expects {expect:?}"),
            });
        }
        Ok(data)
    };
    for (prefix, model) in [("student", &mut state.student), ("teacher", &mut state.teacher)] {
        for (n, t) in model.tensors_mut() {
            let shape = t.shape().to_vec();
            t.data_mut().copy_from_slice(&take(format!("{prefix}.{n}"), &shape)?);
        }
    }
    for (n, t) in state.frozen_encoder.iter_mut() {
        let shape = t.shape().to_vec();
        t.data_mut().copy_from_slice(&take(format!("frozen.{n}"), &shape)?);
    }
    let steps: std::collections::HashMap<&str, u64> = meta.adam_steps.iter().map(|(n, s)| (n.as_str(), *s)).collect();
    for (n, st) in state.moments.iter_mut() {
        let len = [st.m.len()];
        st.m = take(format!("adam.m.{n}"), &len)?;
        st.v = take(format!("adam.v.{n}"), &len)?;
        st.step = *steps.get(n.as_str()).ok_or_else(|| CheckpointError::Tensor {
            name: n.clone(),
            msg: "missing optimizer step".into(),
        })?;
    }
    if let Some(extra) = values.keys().next() {
        return Err(CheckpointError::Tensor {
            name: extra.to_string(),
            msg: "not part of this model".into(),
        });
    }
    Ok(state)
}

/// Written to a sibling temp file first, then renamed into place.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(state))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, CheckpointError> {
    decode(&fs::read(path)?)
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta, CheckpointError> {
    let bytes = fs::read(path)?;
    Ok(parse(&bytes)?.0)
}
