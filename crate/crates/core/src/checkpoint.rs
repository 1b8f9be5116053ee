//! Checkpoint directories: `manifest.json` plus one little-endian f64 blob.
//!
//! The manifest records the format version, model config, optional training
//! state, and for every tensor its name, shape, dtype and byte offset. The
//! blob's SHA-256 is verified before anything is constructed, so a failed
//! load never yields a partially restored model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ManfError, Result};
use crate::model::{ManfConfig, ManfModel};
use crate::training::{AdamState, EpochRecord, TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "tensors.bin";
const DTYPE: &str = "f64-le";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epoch: usize,
    pub step: u64,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ManfConfig,
    pub train: Option<TrainMeta>,
    pub tensors: Vec<TensorEntry>,
    pub sha256: String,
}

/// A restored model with whatever training state was saved alongside it.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: ManfModel,
    pub train: Option<(TrainState, TrainConfig)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct BlobWriter {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl BlobWriter {
    fn push(&mut self, name: String, shape: &[usize], data: &[f64]) {
        self.entries.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            dtype: DTYPE.into(),
            offset: self.bytes.len(),
        });
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save(dir: &Path, model: &ManfModel, train: Option<(&TrainState, &TrainConfig)>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BlobWriter {
        bytes: Vec::new(),
        entries: Vec::new(),
    };
    for (name, t) in model.store.names().iter().zip(model.store.tensors()) {
        w.push(format!("param/{name}"), t.shape(), t.data());
    }
    for (i, bn) in model.flow.batch_norms().enumerate() {
        w.push(format!("bn{i}/running_mean"), &[bn.running_mean.len()], &bn.running_mean);
        w.push(format!("bn{i}/running_var"), &[bn.running_var.len()], &bn.running_var);
    }
    let meta = train.map(|(state, cfg)| {
        for ((name, t), (m, v)) in model
            .store
            .names()
            .iter()
            .zip(model.store.tensors())
            .zip(state.adam.m.iter().zip(&state.adam.v))
        {
            w.push(format!("adam.m/{name}"), t.shape(), m);
            w.push(format!("adam.v/{name}"), t.shape(), v);
        }
        TrainMeta {
            epoch: state.epoch,
            step: state.adam.step,
            config: cfg.clone(),
            history: state.history.clone(),
        }
    });
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        train: meta,
        tensors: w.entries,
        sha256: hex(&Sha256::digest(&w.bytes)),
    };
    fs::write(dir.join(BLOB), &w.bytes)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(ManfError::Incompatible(format!(
            "format version {version:?}, this build reads {FORMAT_VERSION}"
        )));
    }
    Ok(serde_json::from_value(value)?)
}

struct Blob<'a> {
    bytes: &'a [u8],
    manifest: &'a Manifest,
}

impl Blob<'_> {
    fn take(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let e = self
            .manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| ManfError::Incompatible(format!("missing tensor {name}")))?;
        if e.shape != shape || e.dtype != DTYPE {
            return Err(ManfError::Incompatible(format!(
                "tensor {name}: stored {:?} {}, expected {shape:?} {DTYPE}",
                e.shape, e.dtype
            )));
        }
        let n: usize = shape.iter().product();
        let end = e.offset + 8 * n;
        let raw = self
            .bytes
            .get(e.offset..end)
            .ok_or_else(|| ManfError::Incompatible(format!("tensor {name} runs past the blob")))?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let bytes = fs::read(dir.join(BLOB))?;
    let found = hex(&Sha256::digest(&bytes));
    if found != manifest.sha256 {
        return Err(ManfError::Checksum {
            expected: manifest.sha256.clone(),
            found,
        });
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = manifest.tensors.iter().find(|e| !seen.insert(&e.name)) {
        return Err(ManfError::Incompatible(format!("tensor {} listed twice", dup.name)));
    }
    let blob = Blob {
        bytes: &bytes,
        manifest: &manifest,
    };
    let mut model = ManfModel::new(manifest.config.clone())?;
    let names = model.store.names().to_vec();
    for (name, t) in names.iter().zip(model.store.tensors_mut()) {
        let data = blob.take(&format!("param/{name}"), &t.shape().to_vec())?;
        t.data_mut().copy_from_slice(&data);
    }
    for (i, bn) in model.flow.batch_norms_mut().enumerate() {
        let d = bn.running_mean.len();
        bn.running_mean = blob.take(&format!("bn{i}/running_mean"), &[d])?;
        bn.running_var = blob.take(&format!("bn{i}/running_var"), &[d])?;
    }
    let train = match &manifest.train {
        Some(meta) => {
            let mut adam = AdamState::new(&model.store);
            adam.step = meta.step;
            for (i, (name, t)) in names.iter().zip(model.store.tensors()).enumerate() {
                adam.m[i] = blob.take(&format!("adam.m/{name}"), t.shape())?;
                adam.v[i] = blob.take(&format!("adam.v/{name}"), t.shape())?;
            }
            let state = TrainState {
                epoch: meta.epoch,
                adam,
                history: meta.history.clone(),
            };
            Some((state, meta.config.clone()))
        }
        None => None,
    };
    Ok(Checkpoint { model, train })
}
