//! Binary checkpoint: `ECOR`, a u32 version, a length-prefixed JSON header,
//! then named f64 tensors (parameters, then Adam moments).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig, Trainer};
use crate::autodiff::Tensor;
use crate::corpus::{Taxonomy, Vocabulary};
use crate::model::{Model, ModelConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"ECOR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vocabulary,
    pub emotions: Vec<String>,
    /// Completed optimizer steps; with `train.seed` this is the whole RNG state.
    pub step: u64,
    pub adam_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
    pub first_moments: Vec<Tensor>,
    pub second_moments: Vec<Tensor>,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Self {
        let m = &trainer.model;
        Self {
            meta: CheckpointMeta {
                model: m.config.clone(),
                train: trainer.config.clone(),
                vocab: m.vocab.clone(),
                emotions: m.taxonomy.names().to_vec(),
                step: trainer.step,
                adam_step: trainer.optimizer.step,
            },
            params: m.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            first_moments: trainer.optimizer.m.clone(),
            second_moments: trainer.optimizer.v.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read(&mut bytes.as_slice())
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        let header = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        out.write_all(MAGIC).map_err(io)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        out.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&header).map_err(io)?;
        let count = self.params.len() as u32;
        out.write_all(&count.to_le_bytes()).map_err(io)?;
        for (name, t) in &self.params {
            write_tensor(out, name, t).map_err(io)?;
        }
        for (prefix, moments) in [("adam.m", &self.first_moments), ("adam.v", &self.second_moments)] {
            for ((name, _), t) in self.params.iter().zip(moments) {
                write_tensor(out, &format!("{prefix}.{name}"), t).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(input: &mut R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(input).map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = read_u64(input).map_err(io)? as usize;
        let mut header = vec![0u8; len];
        input.read_exact(&mut header).map_err(io)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = read_u32(input).map_err(io)? as usize;
        let params = (0..count).map(|_| read_tensor(input)).collect::<Result<Vec<_>>>()?;
        let mut moments = |prefix: &str| -> Result<Vec<Tensor>> {
            params
                .iter()
                .map(|(name, shape)| {
                    let (n, t) = read_tensor(input)?;
                    if n != format!("{prefix}.{name}") || t.shape() != shape.shape() {
                        return Err(Error::Checkpoint(format!("optimizer state {n} does not match {name}")));
                    }
                    Ok(t)
                })
                .collect()
        };
        let first_moments = moments("adam.m")?;
        let second_moments = moments("adam.v")?;
        Ok(Self { meta, params, first_moments, second_moments })
    }

    /// Copies parameters into `model`, which must have the same names and shapes.
    pub fn restore_params(&self, model: &mut Model) -> Result<()> {
        if self.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in &self.params {
            let id = model.params.id(name).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            let target = model.params.get_mut(id);
            if target.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?} in the checkpoint but {:?} in the model",
                    t.shape(),
                    target.shape()
                )));
            }
            *target = t.clone();
        }
        Ok(())
    }

    /// Rebuilds the model described by the header and loads its parameters.
    pub fn model(&self) -> Result<Model> {
        let taxonomy = Taxonomy::new(self.meta.emotions.clone());
        let mut model = Model::new(self.meta.model.clone(), self.meta.vocab.clone(), taxonomy, 0)?;
        self.restore_params(&mut model)?;
        Ok(model)
    }

    /// Rebuilds model and optimizer so training continues bit-exactly.
    pub fn trainer(&self) -> Result<Trainer> {
        let model = self.model()?;
        let mut trainer = Trainer::new(model, self.meta.train.clone())?;
        trainer.step = self.meta.step;
        trainer.optimizer = Adam {
            step: self.meta.adam_step,
            m: self.first_moments.clone(),
            v: self.second_moments.clone(),
            ..trainer.optimizer
        };
        Ok(trainer)
    }
}

fn write_tensor<W: Write>(out: &mut W, name: &str, t: &Tensor) -> std::io::Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(input: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor<R: Read>(input: &mut R) -> Result<(String, Tensor)> {
    let io = |e: std::io::Error| Error::Checkpoint(format!("truncated tensor: {e}"));
    let len = read_u32(input).map_err(io)? as usize;
    let mut name = vec![0u8; len];
    input.read_exact(&mut name).map_err(io)?;
    let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
    let rank = read_u32(input).map_err(io)? as usize;
    let shape = (0..rank).map(|_| read_u64(input).map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>().map_err(io)?;
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 8];
    input.read_exact(&mut raw).map_err(io)?;
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
    Ok((name, t))
}
