//! Binary checkpoint container.
//!
//! ```text
//! "VPCK" | u32 version | u32 meta_len | meta (JSON)
//! u32 array_count, then per array: u16 name_len | name | u8 dtype | u64 len | data
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! All integers little-endian; dtype 0 is f32, 1 is f64. Parameters and
//! optimizer moments are written as f64 so a resumed run is bit-identical.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{Model, ModelConfig, ModelParams};
use crate::optim::{AdamState, Optimizer, OptimizerKind};

use super::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Optimizer,
    pub train_config: TrainConfig,
    pub phase: u32,
    /// Steps taken in the current phase.
    pub step: u64,
    pub epoch_fraction: f64,
    pub num_videos: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model_config: ModelConfig,
    train_config: TrainConfig,
    optimizer: OptimizerKind,
    optimizer_step: u64,
    phase: u32,
    step: u64,
    epoch_fraction: f64,
    num_videos: u64,
    /// Batch-stream position, `step · batch_size`.
    stream_position: u64,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = Meta {
        model_config: ckpt.model.config,
        train_config: ckpt.train_config,
        optimizer: ckpt.optimizer.kind(),
        optimizer_step: ckpt.optimizer.steps_taken(),
        phase: ckpt.phase,
        step: ckpt.step,
        epoch_fraction: ckpt.epoch_fraction,
        num_videos: ckpt.num_videos,
        stream_position: ckpt.step * ckpt.train_config.batch_size as u64,
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| format_err(format!("checkpoint metadata: {e}")))?;

    let mut arrays: Vec<(String, &[f64])> = ckpt
        .model
        .params
        .arrays()
        .into_iter()
        .map(|(n, a)| (format!("param.{n}"), a))
        .collect();
    if let Optimizer::Adam(s) = &ckpt.optimizer {
        arrays.extend(s.first_moment.arrays().into_iter().map(|(n, a)| (format!("adam.m.{n}"), a)));
        arrays.extend(s.second_moment.arrays().into_iter().map(|(n, a)| (format!("adam.v.{n}"), a)));
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, data) in arrays {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format_err(format!("checkpoint ends inside a field at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format_err("not a checkpoint (bad magic)"));
    }
    if bytes.len() < 16 {
        return Err(format_err(format!("checkpoint is only {} bytes", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut c = Cursor { buf: body, pos: 4 };
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = c.u32()? as usize;
    let meta: Meta = serde_json::from_slice(c.take(meta_len)?)
        .map_err(|e| format_err(format!("checkpoint metadata: {e}")))?;
    meta.model_config.validate()?;

    let count = c.u32()?;
    let mut arrays = HashMap::new();
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| format_err("array name is not UTF-8"))?
            .to_string();
        let dtype = c.u8()?;
        let len = c.u64()? as usize;
        let data: Vec<f64> = match dtype {
            DTYPE_F32 => c
                .take(len.checked_mul(4).ok_or_else(|| format_err("array too large"))?)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            DTYPE_F64 => c
                .take(len.checked_mul(8).ok_or_else(|| format_err("array too large"))?)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            d => return Err(format_err(format!("array {name} has unknown dtype {d}"))),
        };
        if arrays.insert(name.clone(), data).is_some() {
            return Err(format_err(format!("array {name} appears twice")));
        }
    }
    if c.pos != body.len() {
        return Err(format_err("trailing bytes after the last array"));
    }

    let cfg = meta.model_config;
    let params = fill(&cfg, "param.", &mut arrays)?;
    let optimizer = match meta.optimizer {
        OptimizerKind::Adam => Optimizer::Adam(AdamState {
            first_moment: fill(&cfg, "adam.m.", &mut arrays)?,
            second_moment: fill(&cfg, "adam.v.", &mut arrays)?,
            step: meta.optimizer_step,
        }),
        OptimizerKind::Sgd => Optimizer::Sgd { step: meta.optimizer_step },
    };
    if let Some(extra) = arrays.keys().next() {
        return Err(format_err(format!("unexpected array {extra}")));
    }
    Ok(Checkpoint {
        model: Model { config: cfg, params },
        optimizer,
        train_config: meta.train_config,
        phase: meta.phase,
        step: meta.step,
        epoch_fraction: meta.epoch_fraction,
        num_videos: meta.num_videos,
    })
}

fn fill(cfg: &ModelConfig, prefix: &str, arrays: &mut HashMap<String, Vec<f64>>) -> Result<ModelParams> {
    let mut p = ModelParams::zeros(cfg);
    for (name, dst) in p.arrays_mut() {
        let key = format!("{prefix}{name}");
        let src = arrays.remove(&key).ok_or_else(|| format_err(format!("missing array {key}")))?;
        if src.len() != dst.len() {
            return Err(Error::Shape(format!(
                "array {key} has {} values, expected {}",
                src.len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(&src);
    }
    Ok(p)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
