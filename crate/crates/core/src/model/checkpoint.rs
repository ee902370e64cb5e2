//! Binary checkpoint format.
//!
//! ```text
//! "SPCK" | u16 version | u32 header_len | header (TOML)
//! u32 n_tensors | per tensor: u16 name_len, name, u8 rank, u32 dims.., f32 values..
//! u8 has_optimizer | [u64 step | per tensor: f32 m.. | per tensor: f32 v..]
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelConfig, ModelError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("corrupt header: {0}")]
    Header(String),
    #[error("corrupt tensor section: {0}")]
    Tensor(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    step: u64,
    epoch: u64,
    model: ModelConfig,
}

/// Adam moments, one buffer per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub epoch: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

fn read_u8(r: &mut impl Read) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> io::Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn write_f32s(w: &mut impl Write, values: &[f32]) -> io::Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    w.write_all(&bytes)
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, step: u64, epoch: u64) -> Self {
        Self {
            config: model.config().clone(),
            step,
            epoch,
            tensors: model.params().iter().map(|(_, p)| (p.name.clone(), p.tensor.clone())).collect(),
            optimizer: None,
        }
    }

    pub fn to_model(&self) -> Result<Model<f32>, CheckpointError> {
        let mut model = Model::build(self.config.clone(), 0)?;
        model.load_tensors(self.tensors.clone())?;
        Ok(model)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        let header = toml::to_string(&Header {
            step: self.step,
            epoch: self.epoch,
            model: self.config.clone(),
        })
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            write_f32s(w, t.data())?;
        }
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(opt) => {
                w.write_all(&[1])?;
                w.write_all(&opt.step.to_le_bytes())?;
                for buf in opt.m.iter().chain(&opt.v) {
                    write_f32s(w, buf)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = read_u16(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = read_u32(r)? as usize;
        let mut text = vec![0u8; len];
        r.read_exact(&mut text)?;
        let text = String::from_utf8(text).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let header: Header = toml::from_str(&text).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = read_u16(r)? as usize;
            let mut name = vec![0u8; n];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| CheckpointError::Tensor(e.to_string()))?;
            let rank = read_u8(r)? as usize;
            let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<io::Result<Vec<_>>>()?;
            let data = read_f32s(r, shape.iter().product())?;
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Tensor(e.to_string()))?;
            tensors.push((name, t));
        }
        let optimizer = match read_u8(r)? {
            0 => None,
            1 => {
                let step = read_u64(r)?;
                let mut read_all = || -> io::Result<Vec<Vec<f32>>> {
                    tensors.iter().map(|(_, t)| read_f32s(r, t.numel())).collect()
                };
                let m = read_all()?;
                let v = read_all()?;
                Some(OptimizerSnapshot { step, m, v })
            }
            b => return Err(CheckpointError::Tensor(format!("bad optimizer flag {b}"))),
        };
        Ok(Self {
            config: header.model,
            step: header.step,
            epoch: header.epoch,
            tensors,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, buf)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn small() -> Model<f32> {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            conv_kernel: 3,
            ..ModelConfig::toy(Variant::Splitformer, 6)
        };
        Model::build(cfg, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = small();
        let mut ck = Checkpoint::from_model(&model, 42, 3);
        ck.optimizer = Some(OptimizerSnapshot {
            step: 42,
            m: ck.tensors.iter().map(|(_, t)| vec![0.25; t.numel()]).collect(),
            v: ck.tensors.iter().map(|(_, t)| vec![1e-9; t.numel()]).collect(),
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap().params(), model.params());
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Checkpoint::read_from(&mut &b"NOPE\x01\x00"[..]), Err(CheckpointError::Magic)));
        let mut buf = Vec::new();
        Checkpoint::from_model(&small(), 0, 0).write_to(&mut buf).unwrap();
        buf[4] = 9;
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice()), Err(CheckpointError::Version(9))));
        buf[4] = 1;
        buf.truncate(buf.len() - 10);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
