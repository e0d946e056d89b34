//! Binary checkpoints: magic, version, JSON header, little-endian f64
//! tensors, SHA-256 trailer over everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LossTrace, Progress, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::geometry::SceneBounds;
use crate::network::{AdamConfig, AdamState, FieldModel, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RDFIELD\0";
pub const CHECKPOINT_VERSION: u32 = 2;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    bounds: SceneBounds,
    adam: AdamConfig,
    train: TrainConfig,
    progress: Progress,
    trace: LossTrace,
    height_adam_step: u64,
    appearance_adam_step: u64,
    semantic_adam_step: u64,
    tensors: Vec<(String, usize)>,
}

/// Everything restored by [`load_checkpoint`].
pub type Checkpoint = Trainer;

fn adam_tensors<'a>(prefix: &str, s: &'a AdamState, out: &mut Vec<(String, &'a [f64])>) {
    for (i, (m, v)) in s.first.iter().zip(&s.second).enumerate() {
        out.push((format!("adam.{prefix}.first.{i}"), m));
        out.push((format!("adam.{prefix}.second.{i}"), v));
    }
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let model = &trainer.model;
    let mut tensors = model.tensors();
    adam_tensors("height", &model.height_optimizer, &mut tensors);
    adam_tensors("appearance", &model.appearance_optimizer, &mut tensors);
    adam_tensors("semantic", &model.semantic_optimizer, &mut tensors);
    let header = Header {
        model: model.config().clone(),
        bounds: *model.bounds(),
        adam: model.height_optimizer.config,
        train: trainer.config.clone(),
        progress: trainer.progress,
        trace: trainer.trace.clone(),
        height_adam_step: model.height_optimizer.step,
        appearance_adam_step: model.appearance_optimizer.step,
        semantic_adam_step: model.semantic_optimizer.step,
        tensors: tensors.iter().map(|(n, s)| (n.clone(), s.len())).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let total: usize = tensors.iter().map(|(_, s)| s.len()).sum();
    let mut buf = Vec::with_capacity(8 + 4 + 8 + json.len() + 8 * total + 32);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, s) in &tensors {
        for v in *s {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(fail("checksum mismatch"));
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json_end = 20usize.checked_add(json_len).filter(|e| *e <= body.len()).ok_or_else(|| fail("truncated header"))?;
    let header: Header = serde_json::from_slice(&body[20..json_end]).map_err(|e| fail(&format!("bad header: {e}")))?;
    let total: usize = header.tensors.iter().map(|(_, n)| n).sum();
    let payload = &body[json_end..];
    if payload.len() != total * 8 {
        return Err(fail("payload size does not match header"));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut named: Vec<(String, Vec<f64>)> = header
        .tensors
        .iter()
        .map(|(n, len)| (n.clone(), values.by_ref().take(*len).collect()))
        .collect();
    let adam_at = named
        .iter()
        .position(|(n, _)| n.starts_with("adam."))
        .unwrap_or(named.len());
    let adam = named.split_off(adam_at);
    let mut model = FieldModel::new(header.model, header.bounds, header.adam)?;
    model.load_tensors(named)?;
    let restore = |prefix: &str, state: &mut AdamState, step: u64| -> Result<()> {
        let mine: Vec<&(String, Vec<f64>)> = adam
            .iter()
            .filter(|(n, _)| n.starts_with(&format!("adam.{prefix}.")))
            .collect();
        if mine.len() != 2 * state.first.len() {
            return Err(fail(&format!("{prefix} optimizer state has the wrong slot count")));
        }
        for (i, pair) in mine.chunks(2).enumerate() {
            if pair[0].1.len() != state.first[i].len() || pair[1].1.len() != state.second[i].len() {
                return Err(fail(&format!("{prefix} optimizer slot {i} has the wrong size")));
            }
            state.first[i].clone_from(&pair[0].1);
            state.second[i].clone_from(&pair[1].1);
        }
        state.step = step;
        Ok(())
    };
    restore("height", &mut model.height_optimizer, header.height_adam_step)?;
    restore("appearance", &mut model.appearance_optimizer, header.appearance_adam_step)?;
    restore("semantic", &mut model.semantic_optimizer, header.semantic_adam_step)?;
    let mut trainer = Trainer::new(model, header.train)?;
    trainer.progress = header.progress;
    trainer.trace = header.trace;
    Ok(trainer)
}
