//! Single-file checkpoints: magic, version, JSON metadata, length-prefixed
//! named f32 tensors and a trailing CRC-32 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::OptimizerState;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ModelParams;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SEUNETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ModelParams<f32>,
    pub opt: OptimizerState<f32>,
    pub best_val_dsc: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    best_val_dsc: Option<f64>,
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(b: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(b, name.len() as u32);
    b.extend_from_slice(name.as_bytes());
    put_u32(b, shape.len() as u32);
    for &d in shape {
        b.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.opt.step,
            best_val_dsc: self.best_val_dsc,
        })?;
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        put_u32(&mut b, CHECKPOINT_VERSION);
        put_u32(&mut b, meta.len() as u32);
        b.extend_from_slice(&meta);
        put_u32(&mut b, (3 * self.params.len()) as u32);
        for (name, t) in self.params.iter() {
            put_tensor(&mut b, &format!("param/{name}"), t.shape(), t.data());
        }
        for (kind, map) in [("adam_m", &self.opt.m), ("adam_v", &self.opt.v)] {
            for (name, v) in map {
                put_tensor(&mut b, &format!("{kind}/{name}"), &[v.len()], v);
            }
        }
        let crc = crc32fast::hash(&b);
        put_u32(&mut b, crc);
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint file".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err("checksum mismatch, file is corrupt".into());
        }
        let mut cur = Cursor { b: body, at: 12 };
        let meta_len = cur.u32()? as usize;
        let meta: Meta = serde_json::from_slice(cur.take(meta_len)?).map_err(|e| format!("metadata: {e}"))?;
        let n = cur.u32()?;
        let mut params = ModelParams::new();
        let mut opt = OptimizerState {
            step: meta.step,
            m: Default::default(),
            v: Default::default(),
        };
        for _ in 0..n {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| "tensor name is not UTF-8")?
                .to_string();
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = cur
                .take(4 * numel)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let (kind, key) = name.split_once('/').ok_or_else(|| format!("bad tensor name '{name}'"))?;
            match kind {
                "param" => params.insert(key, Tensor::param(data, &shape).map_err(|e| e.to_string())?),
                "adam_m" => drop(opt.m.insert(key.to_string(), data)),
                "adam_v" => drop(opt.v.insert(key.to_string(), data)),
                _ => return Err(format!("unknown tensor kind '{kind}'")),
            }
        }
        if cur.at != body.len() {
            return Err(format!("{} trailing bytes", body.len() - cur.at));
        }
        for name in params.names() {
            if !opt.m.contains_key(name) || !opt.v.contains_key(name) {
                return Err(format!("optimizer state missing for `{name}`"));
            }
        }
        Ok(Self {
            model: meta.model,
            train: meta.train,
            params,
            opt,
            best_val_dsc: meta.best_val_dsc,
        })
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let s = self.b.get(self.at..self.at + n).ok_or("unexpected end of file")?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn checkpoint_save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes()?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint; with `expect` set, a different model configuration
/// is reported as an error.
pub fn checkpoint_load(path: impl AsRef<Path>, expect: Option<&ModelConfig>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let err = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let ckpt = Checkpoint::from_bytes(&fs::read(path)?).map_err(err)?;
    if let Some(cfg) = expect {
        if *cfg != ckpt.model {
            return Err(err(format!(
                "model configuration mismatch: checkpoint has {}, expected {}",
                serde_json::to_string(&ckpt.model)?,
                serde_json::to_string(cfg)?
            )));
        }
    }
    Ok(ckpt)
}
