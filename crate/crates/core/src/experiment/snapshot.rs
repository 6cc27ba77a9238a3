//! Snapshot files: an 8-byte little-endian header length, a JSON header, then
//! every tensor as little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::gradcore::{ParamStore, TensorId};
use crate::models::{BaseModelKind, Model, ModelSpec};
use crate::rng::Rng;

pub const FORMAT_VERSION: u32 = 1;

/// Tensor name prefix of every model an experiment trains or loads.
pub const MODEL_PREFIX: &str = "model";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    /// Last-hidden width of the stored model.
    pub width: usize,
    pub neumf_layers: usize,
    /// Teacher width the model was sized against.
    pub teacher_width: usize,
    pub num_experts: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub format_version: u32,
    /// `teacher`, `student` or `experts`.
    pub role: String,
    pub base_model: String,
    pub method: String,
    pub phi: f64,
    pub dims: Dims,
    pub num_users: usize,
    pub num_items: usize,
    /// Split checksum of the dataset, 16 hex digits.
    pub dataset_checksum: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

impl SnapshotHeader {
    pub fn base_model(&self) -> Result<BaseModelKind> {
        self.base_model.parse()
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec {
            kind: self.base_model()?,
            num_users: self.num_users,
            num_items: self.num_items,
            width: self.dims.width,
            neumf_layers: self.dims.neumf_layers,
        })
    }

    /// Refuse a dataset other than the one the snapshot was trained on.
    pub fn check_dataset(&self, ds: &InteractionDataset) -> Result<()> {
        let got = format!("{:016x}", ds.checksum());
        if got != self.dataset_checksum {
            return Err(Error::Snapshot(format!(
                "dataset checksum {got} does not match snapshot {}",
                self.dataset_checksum
            )));
        }
        Ok(())
    }
}

/// Round every value of `ids` to the nearest `f32`, so that what is
/// evaluated is exactly what a snapshot stores.
pub fn quantize_f32(params: &mut ParamStore, ids: &[TensorId]) {
    for &id in ids {
        for x in params.value_mut(id) {
            *x = *x as f32 as f64;
        }
    }
}

/// Serialize `ids` of `params`; `header.tensors` is filled in here.
pub fn encode(mut header: SnapshotHeader, params: &ParamStore, ids: &[TensorId]) -> Result<Vec<u8>> {
    header.format_version = FORMAT_VERSION;
    header.tensors = ids
        .iter()
        .map(|&id| TensorEntry {
            name: params.name(id).to_string(),
            shape: params.shape(id).to_vec(),
        })
        .collect();
    let json = serde_json::to_vec(&header).map_err(|e| Error::Snapshot(e.to_string()))?;
    let body: usize = ids.iter().map(|&id| params.value(id).len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 4 * body);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for &id in ids {
        for &x in params.value(id) {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse a snapshot into its header and a store holding its tensors.
pub fn decode(bytes: &[u8]) -> Result<(SnapshotHeader, ParamStore)> {
    let err = |m: &str| Error::Snapshot(m.to_string());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| err("truncated header length"))?.try_into().unwrap();
    let len = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes.get(8..8 + len).ok_or_else(|| err("truncated header"))?;
    let header: SnapshotHeader = serde_json::from_slice(json).map_err(|e| Error::Snapshot(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Snapshot(format!("unsupported format version {}", header.format_version)));
    }
    let mut params = ParamStore::new();
    let mut at = 8 + len;
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = bytes
            .get(at..at + 4 * n)
            .ok_or_else(|| Error::Snapshot(format!("truncated data for tensor `{}`", t.name)))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.add(t.name.clone(), &t.shape, values)?;
        at += 4 * n;
    }
    if at != bytes.len() {
        return Err(err("trailing bytes after the last tensor"));
    }
    Ok((header, params))
}

pub fn save(path: impl AsRef<Path>, header: SnapshotHeader, params: &ParamStore, ids: &[TensorId]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(header, params, ids)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(SnapshotHeader, ParamStore)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Rebuild the model described by a loaded header on top of its store.
pub fn model_from(header: &SnapshotHeader, params: &ParamStore) -> Result<Model> {
    use rand::SeedableRng;
    let mut scratch = ParamStore::new();
    let skeleton = Model::build(&header.spec()?, &mut scratch, MODEL_PREFIX, &mut Rng::seed_from_u64(0))?;
    let model = skeleton.rebind(&scratch, params)?;
    for id in model.tensors() {
        let expected = scratch.shape(scratch.id(params.name(id)).expect("rebind keeps names"));
        if params.shape(id) != expected {
            return Err(Error::Snapshot(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                params.name(id),
                params.shape(id),
                expected
            )));
        }
    }
    Ok(model)
}
