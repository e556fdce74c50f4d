//! Tensor persistence: a JSON manifest next to a flat binary of
//! little-endian `f32` values, row-major, concatenated in manifest order.
//! Shared by model and adapter checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MatrixRole, ModelWeights, TransformerConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BINARY_FILE: &str = "tensors.bin";
pub const DTYPE: &str = "f32";

/// Location of one tensor inside the binary file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<MatrixRole>,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub config: TransformerConfig,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub binary: String,
    pub tensors: Vec<TensorRecord>,
}

pub const MODEL_FORMAT: &str = "ksan-model";

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serializes tensors back to back and returns their byte offsets.
pub(crate) fn encode_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> (Vec<u8>, Vec<u64>) {
    let mut bytes = Vec::new();
    let mut offsets = Vec::new();
    for t in tensors {
        offsets.push(bytes.len() as u64);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (bytes, offsets)
}

/// Reads tensors described by `(shape, offset)` pairs; the file must hold
/// exactly those tensors, contiguously and in order.
pub(crate) fn decode_tensors(path: &Path, specs: &[(Vec<usize>, u64)]) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    let mut cursor = 0u64;
    let mut out = Vec::with_capacity(specs.len());
    for (i, (shape, offset)) in specs.iter().enumerate() {
        if *offset != cursor {
            return Err(corrupt(format!(
                "tensor {i} starts at byte {offset}, expected {cursor}"
            )));
        }
        let numel: usize = shape.iter().product();
        let end = cursor + 4 * numel as u64;
        if end > bytes.len() as u64 {
            return Err(corrupt(format!(
                "truncated: tensor {i} needs bytes {cursor}..{end} of {}",
                bytes.len()
            )));
        }
        let data = bytes[cursor as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(Tensor::new(shape.clone(), data).map_err(|e| corrupt(e.to_string()))?);
        cursor = end;
    }
    if cursor != bytes.len() as u64 {
        return Err(corrupt(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() as u64 - cursor
        )));
    }
    Ok(out)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.to_path_buf(),
                reason: "file not found".into(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Saves weights under `dir` with free-form `metadata` in the manifest.
pub fn save_model(weights: &ModelWeights, dir: &Path, metadata: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (bytes, offsets) = encode_tensors(weights.entries().iter().map(|e| e.tensor()));
    let tensors = weights
        .entries()
        .iter()
        .zip(offsets)
        .map(|(e, offset)| TensorRecord {
            name: e.name().to_string(),
            role: Some(e.role()),
            shape: e.tensor().shape().to_vec(),
            dtype: DTYPE.into(),
            offset,
        })
        .collect();
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        version: 1,
        config: *weights.config(),
        metadata,
        binary: BINARY_FILE.into(),
        tensors,
    };
    write_atomic(&dir.join(BINARY_FILE), &bytes)?;
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)
}

/// Loads a checkpoint written by [`save_model`].
pub fn load_model(dir: &Path) -> Result<(ModelWeights, ModelManifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: ModelManifest = read_json(&manifest_path)?;
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: manifest_path.clone(),
        reason,
    };
    if manifest.format != MODEL_FORMAT {
        return Err(corrupt(format!("format `{}` is not a model checkpoint", manifest.format)));
    }
    if let Some(r) = manifest.tensors.iter().find(|r| r.dtype != DTYPE) {
        return Err(corrupt(format!("tensor `{}` has dtype {}", r.name, r.dtype)));
    }
    let specs: Vec<_> = manifest
        .tensors
        .iter()
        .map(|r| (r.shape.clone(), r.offset))
        .collect();
    let binary = binary_path(dir, &manifest.binary)?;
    let tensors = decode_tensors(&binary, &specs)?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (r, t) in manifest.tensors.iter().zip(tensors) {
        let role = r
            .role
            .ok_or_else(|| corrupt(format!("tensor `{}` has no role", r.name)))?;
        entries.push((r.name.clone(), role, t));
    }
    let weights = ModelWeights::from_entries(manifest.config, entries)?;
    Ok((weights, manifest))
}

pub(crate) fn binary_path(dir: &Path, name: &str) -> Result<PathBuf> {
    if name.contains('/') || name.contains('\\') || name == ".." {
        return Err(Error::CorruptCheckpoint {
            path: dir.join(MANIFEST_FILE),
            reason: format!("binary name `{name}` escapes the checkpoint directory"),
        });
    }
    let p = dir.join(name);
    if !p.exists() {
        return Err(Error::MissingArtifact {
            path: p,
            reason: "binary tensor file not found".into(),
        });
    }
    Ok(p)
}
