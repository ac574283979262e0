//! Checkpoints: a JSON manifest `X` listing every parameter in order, plus
//! a flat little-endian `f32` blob `X.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, MultiHeadModel};
use crate::params::{Owner, ParamKind};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_FORMAT: &str = "dks-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// `backbone`, `aux:<head>` or `bn_running_stat`.
    pub role: String,
    /// `backbone` or the head id; disambiguates running statistics.
    pub owner: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelSpec,
    pub blob_bytes: u64,
    pub params: Vec<ParamRecord>,
}

fn owner_tag(o: Owner) -> String {
    match o {
        Owner::Backbone => "backbone".into(),
        Owner::Aux(h) => h.to_string(),
    }
}

fn role_tag(kind: ParamKind, owner: Owner) -> String {
    match (kind, owner) {
        (ParamKind::RunningStat, _) => "bn_running_stat".into(),
        (ParamKind::Trainable, Owner::Backbone) => "backbone".into(),
        (ParamKind::Trainable, Owner::Aux(h)) => format!("aux:{h}"),
    }
}

/// Path of the binary blob belonging to manifest `path`.
pub fn blob_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

/// Serializes a model into manifest text and blob bytes.
pub fn encode<T: Scalar>(model: &MultiHeadModel<T>) -> (String, Vec<u8>) {
    let mut blob = Vec::new();
    let mut params = Vec::with_capacity(model.params().len());
    for (_, p) in model.params().iter() {
        params.push(ParamRecord {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            role: role_tag(p.kind, p.owner),
            owner: owner_tag(p.owner),
            byte_offset: blob.len() as u64,
        });
        for &v in p.value.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: model.spec().clone(),
        blob_bytes: blob.len() as u64,
        params,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    (text, blob)
}

/// Rebuilds a model from manifest text and blob bytes. `origin` names the
/// source in error messages.
pub fn decode<T: Scalar>(manifest: &str, blob: &[u8], origin: &Path) -> Result<MultiHeadModel<T>> {
    let corrupt = |msg: String| Error::corrupt(origin, msg);
    let m: Manifest =
        serde_json::from_str(manifest).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported format {} v{}",
            m.format, m.version
        )));
    }
    if m.blob_bytes != blob.len() as u64 {
        return Err(corrupt(format!(
            "blob holds {} bytes, manifest declares {}",
            blob.len(),
            m.blob_bytes
        )));
    }
    let mut model =
        MultiHeadModel::<T>::build(&m.model, 0).map_err(|e| corrupt(format!("model spec: {e}")))?;
    if m.params.len() != model.params().len() {
        return Err(corrupt(format!(
            "{} parameter records for a model with {} parameters",
            m.params.len(),
            model.params().len()
        )));
    }
    for rec in &m.params {
        let id = model
            .params()
            .find(&rec.name)
            .ok_or_else(|| corrupt(format!("unknown parameter {}", rec.name)))?;
        let p = model.params().get(id);
        if p.value.shape() != rec.shape.as_slice()
            || rec.role != role_tag(p.kind, p.owner)
            || rec.owner != owner_tag(p.owner)
        {
            return Err(corrupt(format!(
                "record for {} does not match the model",
                rec.name
            )));
        }
        let start = rec.byte_offset as usize;
        let end = start + 4 * p.value.numel();
        if end > blob.len() {
            return Err(corrupt(format!(
                "{} extends past the end of the blob",
                rec.name
            )));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        *model.params_mut().value_mut(id) = Tensor::new(&rec.shape, data)?;
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &MultiHeadModel<T>, path: &Path) -> Result<()> {
    let (text, blob) = encode(model);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let bp = blob_path(path);
    fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<MultiHeadModel<T>> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text =
        String::from_utf8(text).map_err(|_| Error::corrupt(path, "manifest is not UTF-8"))?;
    let bp = blob_path(path);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    decode(&text, &blob, path)
}
