use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ReasonerError};
use crate::numerics::{ParamStore, Scalar, Tensor};
use crate::text::Vocab;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// AdamW moments, laid out like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub step: u64,
    pub m: ParamStore<S>,
    pub v: ParamStore<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub model: Model<S>,
    /// Last completed training stage (0 = freshly initialized).
    pub stage: u8,
    pub step: u64,
    pub optimizer: Option<OptimizerState<S>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    stage: u8,
    step: u64,
    config: ModelConfig,
    vocab: Vocab,
    tensors: Vec<TensorEntry>,
    optimizer_step: Option<u64>,
}

fn io_err(path: &Path, e: std::io::Error) -> ReasonerError {
    ReasonerError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> ReasonerError {
    ReasonerError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn pack<S: Scalar>(store: &ParamStore<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.num_scalars() * S::BYTES);
    for p in store.iter() {
        for &x in p.tensor.data() {
            x.write_le(&mut out);
        }
    }
    out
}

fn unpack<S: Scalar>(bytes: &[u8], entries: &[TensorEntry], path: &Path) -> Result<ParamStore<S>, ReasonerError> {
    let mut store = ParamStore::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let (a, b) = (e.offset * S::BYTES, (e.offset + n) * S::BYTES);
        let chunk = bytes
            .get(a..b)
            .ok_or_else(|| format_err(path, format!("`{}` runs past the end of the file", e.name)))?;
        let data = chunk.chunks_exact(S::BYTES).map(S::read_le).collect();
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok(store)
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(model: Model<S>) -> Self {
        Self {
            model,
            stage: 0,
            step: 0,
            optimizer: None,
        }
    }

    /// Writes `model.json`, `weights.bin` and, with optimizer state,
    /// `optimizer.bin` (first moments then second moments).
    pub fn save(&self, dir: &Path) -> Result<(), ReasonerError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut offset = 0;
        let tensors = self
            .model
            .params
            .iter()
            .map(|p| {
                let e = TensorEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    offset,
                };
                offset += p.tensor.len();
                e
            })
            .collect();
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dtype: S::DTYPE.into(),
            stage: self.stage,
            step: self.step,
            config: self.model.config.clone(),
            vocab: self.model.vocab.clone(),
            tensors,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let path = dir.join("model.json");
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        json.push('\n');
        fs::write(&path, json).map_err(|e| io_err(&path, e))?;
        let path = dir.join("weights.bin");
        fs::write(&path, pack(&self.model.params)).map_err(|e| io_err(&path, e))?;
        let path = dir.join("optimizer.bin");
        match &self.optimizer {
            Some(o) => {
                let mut bytes = pack(&o.m);
                bytes.extend(pack(&o.v));
                fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
            }
            None if path.exists() => fs::remove_file(&path).map_err(|e| io_err(&path, e))?,
            None => {}
        }
        Ok(())
    }

    /// Loads a checkpoint and checks every tensor against the architecture
    /// its config implies.
    pub fn load(dir: &Path) -> Result<Self, ReasonerError> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(format_err(
                &path,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        if manifest.dtype != S::DTYPE {
            return Err(format_err(
                &path,
                format!("weights are {}, expected {}", manifest.dtype, S::DTYPE),
            ));
        }
        manifest.config.validate()?;
        let expected = manifest.config.param_shapes();
        if expected.len() != manifest.tensors.len() {
            return Err(format_err(
                &path,
                format!(
                    "config implies {} tensors, manifest lists {}",
                    expected.len(),
                    manifest.tensors.len()
                ),
            ));
        }
        for ((name, r, c), e) in expected.iter().zip(&manifest.tensors) {
            if name != &e.name || e.shape != [*r, *c] {
                return Err(format_err(
                    &path,
                    format!(
                        "tensor `{}` {:?} does not match expected `{name}` [{r}, {c}]",
                        e.name, e.shape
                    ),
                ));
            }
        }
        let wpath = dir.join("weights.bin");
        let bytes = fs::read(&wpath).map_err(|e| io_err(&wpath, e))?;
        let total: usize = manifest.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if bytes.len() != total * S::BYTES {
            return Err(format_err(
                &wpath,
                format!("expected {} bytes, found {}", total * S::BYTES, bytes.len()),
            ));
        }
        let params = unpack(&bytes, &manifest.tensors, &wpath)?;
        let optimizer = match manifest.optimizer_step {
            Some(step) => {
                let opath = dir.join("optimizer.bin");
                let bytes = fs::read(&opath).map_err(|e| io_err(&opath, e))?;
                if bytes.len() != 2 * total * S::BYTES {
                    return Err(format_err(&opath, "optimizer state does not match the weights"));
                }
                let half = total * S::BYTES;
                Some(OptimizerState {
                    step,
                    m: unpack(&bytes[..half], &manifest.tensors, &opath)?,
                    v: unpack(&bytes[half..], &manifest.tensors, &opath)?,
                })
            }
            None => None,
        };
        Ok(Self {
            model: Model {
                config: manifest.config,
                vocab: manifest.vocab,
                params,
            },
            stage: manifest.stage,
            step: manifest.step,
            optimizer,
        })
    }
}
