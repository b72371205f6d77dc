//! Binary checkpoint container.
//!
//! ```text
//! "FLATCKPT" | version: u32 LE | manifest length: u64 LE | manifest (JSON)
//! tensor data: f64 LE, concatenated in manifest order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{FlatError, Result};
use crate::hypernet::Theta;
use crate::model::{ModelConfig, ModelParams};
use crate::numkernel::{OptimizerState, Tensor};
use crate::rng::RngState;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FLATCKPT";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub params: ModelParams<Tensor>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
    pub step: u64,
}

impl Checkpoint {
    pub fn theta(&self) -> Theta<f64> {
        self.params.theta()
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    step: u64,
    rng: Option<RngState>,
    /// Optimizer hyperparameters; moments are stored as tensors.
    optimizer: Option<OptimizerState>,
    theta: Theta<f64>,
    tensors: Vec<TensorEntry>,
}

fn ckpt_err(msg: impl Into<String>) -> FlatError {
    FlatError::Checkpoint(msg.into())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let io = |e: std::io::Error| FlatError::Io { path: path.display().to_string(), reason: e.to_string() };
    let mut entries = Vec::new();
    let mut payload: Vec<&[f64]> = Vec::new();
    for (name, t) in ckpt.params.named() {
        entries.push(TensorEntry { name, shape: t.shape().to_vec() });
        payload.push(t.data());
    }
    let optimizer = ckpt.optimizer.as_ref().map(|o| {
        for (kind, moments) in [("m", &o.first_moment), ("v", &o.second_moment)] {
            for (i, m) in moments.iter().enumerate() {
                entries.push(TensorEntry { name: format!("optimizer.{kind}.{i}"), shape: vec![m.len()] });
                payload.push(m);
            }
        }
        OptimizerState { first_moment: Vec::new(), second_moment: Vec::new(), ..o.clone() }
    });
    let manifest = Manifest {
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        step: ckpt.step,
        rng: ckpt.rng.clone(),
        optimizer,
        theta: ckpt.params.theta(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| ckpt_err(e.to_string()))?;
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for data in payload {
        for v in data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let io = |e: std::io::Error| FlatError::Io { path: path.display().to_string(), reason: e.to_string() };
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ckpt_err(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| ckpt_err("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| ckpt_err(format!("bad manifest: {e}")))?;
    manifest.model_config.validate()?;

    let mut cursor = &bytes[20 + len..];
    let mut read_tensor = |entry: &TensorEntry| -> Result<Tensor> {
        let n: usize = entry.shape.iter().product();
        if cursor.len() < n * 8 {
            return Err(ckpt_err(format!("truncated data for {}", entry.name)));
        }
        let data = cursor[..n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        cursor = &cursor[n * 8..];
        Ok(Tensor::new(entry.shape.clone(), data)?)
    };

    // Fill a freshly shaped parameter tree so names and shapes are checked against the config.
    let mut params = ModelParams::init(&manifest.model_config, &Theta::uniform(1.0), &mut crate::rng::stream(0, "shape"))?;
    let expected: Vec<(String, Vec<usize>)> =
        params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let mut entries = manifest.tensors.iter();
    for (slot, (name, shape)) in params.tensors_mut().into_iter().zip(&expected) {
        let entry = entries.next().ok_or_else(|| ckpt_err(format!("missing tensor {name}")))?;
        if &entry.name != name || &entry.shape != shape {
            return Err(ckpt_err(format!("expected {name} {shape:?}, found {} {:?}", entry.name, entry.shape)));
        }
        *slot = read_tensor(entry)?;
    }
    let optimizer = match manifest.optimizer {
        Some(mut o) => {
            let k = expected.len();
            let mut take = |kind: &str| -> Result<Vec<Vec<f64>>> {
                (0..k)
                    .map(|i| {
                        let entry = entries.next().ok_or_else(|| ckpt_err("missing optimizer moments"))?;
                        if entry.name != format!("optimizer.{kind}.{i}") || entry.shape != [expected[i].1.iter().product::<usize>()] {
                            return Err(ckpt_err(format!("unexpected optimizer tensor {}", entry.name)));
                        }
                        Ok(read_tensor(entry)?.into_data())
                    })
                    .collect()
            };
            o.first_moment = take("m")?;
            o.second_moment = take("v")?;
            Some(o)
        }
        None => None,
    };
    if entries.next().is_some() || !cursor.is_empty() {
        return Err(ckpt_err("trailing data after last tensor"));
    }
    Ok(Checkpoint {
        model_config: manifest.model_config,
        train_config: manifest.train_config,
        params,
        optimizer,
        rng: manifest.rng,
        step: manifest.step,
    })
}
