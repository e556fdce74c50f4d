use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdapterSet, LoraAdapter, Provenance};
use crate::error::{Error, Result};
use crate::model::checkpoint::{
    binary_path, decode_tensors, encode_tensors, read_json, write_atomic, TensorRecord,
    BINARY_FILE, DTYPE, MANIFEST_FILE,
};
use crate::model::ModelWeights;

pub const ADAPTER_FORMAT: &str = "ksan-adapters";

#[derive(Debug, Serialize, Deserialize)]
struct AdapterRecord {
    target: String,
    rank: usize,
    alpha: f64,
    a: TensorRecord,
    b: TensorRecord,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterManifest {
    format: String,
    version: u32,
    provenance: Provenance,
    binary: String,
    adapters: Vec<AdapterRecord>,
}

fn record(name: String, t: &crate::numerics::Tensor, offset: u64) -> TensorRecord {
    TensorRecord {
        name,
        role: None,
        shape: t.shape().to_vec(),
        dtype: DTYPE.into(),
        offset,
    }
}

pub fn save_adapters(set: &AdapterSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (bytes, offsets) = encode_tensors(set.tensors());
    let adapters = set
        .iter()
        .zip(offsets.chunks_exact(2))
        .map(|(ad, off)| AdapterRecord {
            target: ad.target.clone(),
            rank: ad.rank,
            alpha: ad.alpha,
            a: record(format!("{}.A", ad.target), &ad.a, off[0]),
            b: record(format!("{}.B", ad.target), &ad.b, off[1]),
        })
        .collect();
    let manifest = AdapterManifest {
        format: ADAPTER_FORMAT.into(),
        version: 1,
        provenance: set.provenance.clone(),
        binary: BINARY_FILE.into(),
        adapters,
    };
    write_atomic(&dir.join(BINARY_FILE), &bytes)?;
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)
}

pub fn load_adapters(dir: &Path) -> Result<AdapterSet> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: AdapterManifest = read_json(&manifest_path)?;
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: manifest_path.clone(),
        reason,
    };
    if manifest.format != ADAPTER_FORMAT {
        return Err(corrupt(format!(
            "format `{}` is not an adapter checkpoint",
            manifest.format
        )));
    }
    let mut specs = Vec::new();
    for r in &manifest.adapters {
        for t in [&r.a, &r.b] {
            if t.dtype != DTYPE {
                return Err(corrupt(format!("tensor `{}` has dtype {}", t.name, t.dtype)));
            }
            specs.push((t.shape.clone(), t.offset));
        }
    }
    let tensors = decode_tensors(&binary_path(dir, &manifest.binary)?, &specs)?;
    let mut it = tensors.into_iter();
    let mut out = Vec::with_capacity(manifest.adapters.len());
    for r in &manifest.adapters {
        let (a, b) = (it.next().expect("two per adapter"), it.next().expect("two per adapter"));
        let ad = LoraAdapter::new(r.target.clone(), a, b, r.alpha).map_err(|e| corrupt(e.to_string()))?;
        if ad.rank != r.rank {
            return Err(corrupt(format!(
                "adapter `{}` declares rank {} but A has {} rows",
                r.target, r.rank, ad.rank
            )));
        }
        out.push(ad);
    }
    AdapterSet::new(out, manifest.provenance).map_err(|e| corrupt(e.to_string()))
}

/// Loads adapters and checks them against the model they will be applied to.
pub fn load_adapters_for(dir: &Path, weights: &ModelWeights) -> Result<AdapterSet> {
    let set = load_adapters(dir)?;
    set.check_targets(weights)?;
    Ok(set)
}
