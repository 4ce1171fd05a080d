//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `PMLAB\0\0\x01`, a little-endian `u64` byte
//! length, that many bytes of UTF-8 JSON manifest, then the parameter blob
//! as little-endian `f64`s. The manifest lists every tensor with its shape
//! and byte offset into the blob; it is validated before the blob is
//! decoded.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{ModelParams, TensorInfo};
use super::ToyTransformer;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"PMLAB\0\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the blob.
    pub offset: usize,
}

impl ParamEntry {
    pub fn byte_len(&self) -> usize {
        self.shape[0] * self.shape[1] * 8
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub step_count: usize,
    pub seed: u64,
    pub losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// `"model"` or `"adapter"`.
    pub kind: String,
    pub model: ModelConfig,
    /// Kind-specific settings (e.g. adapter rank and targets).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub params: Vec<ParamEntry>,
    pub metadata: TrainingMeta,
}

/// A decoded checkpoint: manifest plus one value buffer per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub manifest: Manifest,
    pub tensors: Vec<Vec<f64>>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<(&ParamEntry, &[f64])> {
        self.manifest
            .params
            .iter()
            .zip(&self.tensors)
            .find(|(e, _)| e.name == name)
            .map(|(e, t)| (e, t.as_slice()))
    }
}

/// Writes a container; `params` entries get contiguous offsets.
pub fn write_container(
    path: &Path,
    kind: &str,
    model: &ModelConfig,
    extra: serde_json::Value,
    tensors: &[(TensorInfo, &[f64])],
    metadata: &TrainingMeta,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (info, data) in tensors {
        if data.len() != info.shape.0 * info.shape.1 {
            return Err(Error::DimensionMismatch(format!(
                "tensor {} has {} values for shape {:?}",
                info.name,
                data.len(),
                info.shape
            )));
        }
        entries.push(ParamEntry {
            name: info.name.clone(),
            shape: [info.shape.0, info.shape.1],
            offset,
        });
        offset += data.len() * 8;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        model: model.clone(),
        extra,
        params: entries,
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + offset);
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, data) in tensors {
        for v in data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn validate_manifest(manifest: &Manifest, blob_len: usize) -> Result<()> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let mut spans: Vec<(usize, usize, &str)> = manifest
        .params
        .iter()
        .map(|e| (e.offset, e.offset + e.byte_len(), e.name.as_str()))
        .collect();
    spans.sort();
    let mut end = 0;
    for (start, stop, name) in &spans {
        if *start < end {
            return Err(Error::Checkpoint(format!(
                "tensor {name} overlaps its predecessor"
            )));
        }
        end = *stop;
    }
    let total: usize = manifest.params.iter().map(ParamEntry::byte_len).sum();
    if total != blob_len || end > blob_len {
        return Err(Error::Checkpoint(format!(
            "manifest describes {total} bytes but blob holds {blob_len}"
        )));
    }
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad header (not a checkpoint or unsupported version)",
            path.display()
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json_end = 16usize
        .checked_add(len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..json_end])
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let blob = &bytes[json_end..];
    validate_manifest(&manifest, blob.len())?;
    let tensors = manifest
        .params
        .iter()
        .map(|e| {
            blob[e.offset..e.offset + e.byte_len()]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        })
        .collect();
    Ok(Container { manifest, tensors })
}

pub fn save_checkpoint(model: &ToyTransformer, path: &Path, meta: &TrainingMeta) -> Result<()> {
    write_container(
        path,
        "model",
        model.config(),
        serde_json::Value::Null,
        &model.params().tensors(),
        meta,
    )
}

pub fn load_checkpoint(path: &Path) -> Result<(ToyTransformer, TrainingMeta)> {
    let c = read_container(path)?;
    if c.manifest.kind != "model" {
        return Err(Error::Checkpoint(format!(
            "expected a model checkpoint, found kind {:?}",
            c.manifest.kind
        )));
    }
    let config = c.manifest.model.clone();
    config.validate()?;
    let mut params = ModelParams::zeros(&config);
    let expected: Vec<TensorInfo> = params.tensors().into_iter().map(|(i, _)| i).collect();
    if expected.len() != c.manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors in manifest, model needs {}",
            c.manifest.params.len(),
            expected.len()
        )));
    }
    for ((info, entry), (dst, src)) in expected
        .iter()
        .zip(&c.manifest.params)
        .zip(params.tensors_mut().into_iter().zip(&c.tensors))
    {
        if info.name != entry.name || [info.shape.0, info.shape.1] != entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name, entry.shape, info.name, info.shape
            )));
        }
        dst.copy_from_slice(src);
    }
    let model = ToyTransformer::from_params(config, params)?;
    Ok((model, c.manifest.metadata))
}
