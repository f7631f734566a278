use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io::content_hash;
use crate::error::{NestError, Result};
use crate::model::{Architecture, ModelConfig, ModelWeights};
use crate::numerics::{ParamSet, Scalar, Tensor};
use crate::train::config::TrainConfig;
use crate::train::optim::OptimState;

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.manifest";
pub const CHECKPOINT_BLOB: &str = "checkpoint.blob";
const FORMAT: &str = "nest-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: TensorGroup,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

/// JSON description of a checkpoint blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub arch: Architecture,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub dtype: String,
    pub optimizer_step: Option<u64>,
    pub blob: String,
    pub blob_bytes: usize,
    pub blob_hash: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance such as the run configuration and dataset hash.
    pub metadata: serde_json::Value,
}

/// Everything restored from a checkpoint directory.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub weights: ModelWeights<T>,
    pub optim: Option<OptimState<T>>,
    pub train: Option<TrainConfig>,
    pub metadata: serde_json::Value,
}

fn ckpt_err(msg: impl Into<String>) -> NestError {
    NestError::Checkpoint(msg.into())
}

/// Writes `checkpoint.manifest` and `checkpoint.blob` into `dir`. Files are
/// written under temporary names and renamed, so an interrupted save leaves
/// any earlier checkpoint intact.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    weights: &ModelWeights<T>,
    optim: Option<&OptimState<T>>,
    train: Option<&TrainConfig>,
    metadata: serde_json::Value,
) -> Result<()> {
    if let Some(state) = optim {
        if !state.matches(&weights.params) {
            return Err(ckpt_err("optimizer state does not mirror the parameters"));
        }
    }
    let mut blob = Vec::with_capacity(weights.params.numel() * T::BYTES);
    let mut tensors = Vec::new();
    let mut push = |name: &str, group, shape: &[usize], data: &[T], blob: &mut Vec<u8>| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            group,
            shape: shape.to_vec(),
            dtype: T::DTYPE.to_string(),
            offset: blob.len(),
        });
        data.iter().for_each(|&x| x.write_le(blob));
    };
    for (name, t) in weights.params.iter() {
        push(name, TensorGroup::Param, t.shape(), t.data(), &mut blob);
    }
    if let Some(state) = optim {
        for (i, (name, t)) in weights.params.iter().enumerate() {
            push(name, TensorGroup::AdamM, t.shape(), &state.m[i], &mut blob);
            push(name, TensorGroup::AdamV, t.shape(), &state.v[i], &mut blob);
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        arch: weights.arch,
        model: weights.config.clone(),
        train: train.cloned(),
        dtype: T::DTYPE.to_string(),
        optimizer_step: optim.map(|s| s.step),
        blob: CHECKPOINT_BLOB.to_string(),
        blob_bytes: blob.len(),
        blob_hash: content_hash(&blob),
        tensors,
        metadata,
    };
    fs::create_dir_all(dir)?;
    let tmp_blob = dir.join(format!("{CHECKPOINT_BLOB}.tmp"));
    let tmp_manifest = dir.join(format!("{CHECKPOINT_MANIFEST}.tmp"));
    fs::write(&tmp_blob, &blob)?;
    fs::write(&tmp_manifest, serde_json::to_string_pretty(&manifest)?)?;
    fs::rename(tmp_blob, dir.join(CHECKPOINT_BLOB))?;
    fs::rename(tmp_manifest, dir.join(CHECKPOINT_MANIFEST))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ckpt_err(format!("unreadable manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(ckpt_err(format!("unsupported format {} v{}", manifest.format, manifest.version)));
    }
    Ok(manifest)
}

/// Loads a checkpoint written by [`save_checkpoint`]. Every entry is
/// validated against the configuration before anything is returned.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != T::DTYPE {
        return Err(ckpt_err(format!("checkpoint holds {}, requested {}", manifest.dtype, T::DTYPE)));
    }
    let blob = fs::read(dir.join(&manifest.blob))?;
    if blob.len() != manifest.blob_bytes || content_hash(&blob) != manifest.blob_hash {
        return Err(ckpt_err("blob does not match the manifest hash"));
    }
    let read = |e: &TensorEntry| -> Result<Tensor<T>> {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * T::BYTES;
        if e.dtype != T::DTYPE || end > blob.len() {
            return Err(ckpt_err(format!("tensor {} lies outside the blob", e.name)));
        }
        let data = blob[e.offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::new(&e.shape, data)
    };
    let mut params = ParamSet::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for e in &manifest.tensors {
        let t = read(e)?;
        match e.group {
            TensorGroup::Param => {
                params.add(e.name.clone(), t);
            }
            TensorGroup::AdamM => m.push((e.name.clone(), t.into_data())),
            TensorGroup::AdamV => v.push((e.name.clone(), t.into_data())),
        }
    }
    let weights = ModelWeights::from_params(&manifest.model, manifest.arch, params)?;
    let optim = match manifest.optimizer_step {
        None => None,
        Some(step) => {
            let names: Vec<&str> = weights.params.iter().map(|(n, _)| n).collect();
            let aligned = |list: &[(String, Vec<T>)]| {
                list.len() == names.len() && list.iter().zip(&names).all(|((a, _), b)| a == b)
            };
            if !aligned(&m) || !aligned(&v) {
                return Err(ckpt_err("optimizer moments do not match the parameters"));
            }
            let state = OptimState {
                m: m.into_iter().map(|(_, d)| d).collect(),
                v: v.into_iter().map(|(_, d)| d).collect(),
                step,
            };
            if !state.matches(&weights.params) {
                return Err(ckpt_err("optimizer moment shapes do not match the parameters"));
            }
            Some(state)
        }
    };
    Ok(Checkpoint { weights, optim, train: manifest.train, metadata: manifest.metadata })
}
