//! Adapter checkpoints: `checkpoint.json` naming the architecture, its
//! configuration and every parameter's shape and offset, plus `params.f64`
//! holding the values as little-endian binary64 in manifest order.

use std::fs;
use std::path::Path;

use mma_core::{AdapterKind, AdapterModel, MmaConfig};
use serde::{Deserialize, Serialize};

use crate::format::{sha256_hex, BlobEntry, FormatError};

pub const CHECKPOINT_TAG: &str = "MMA-CKPT-v1";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PARAMS_FILE: &str = "params.f64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub kind: AdapterKind,
    pub config: MmaConfig,
    pub blob: BlobEntry,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(model: &AdapterModel, dir: &Path) -> Result<(), FormatError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| FormatError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut params = Vec::new();
    let mut bytes = Vec::new();
    let mut offset = 0;
    for p in model.params() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.shape().to_vec(),
            offset,
        });
        offset += p.numel();
        bytes.extend(p.tensor.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_TAG.into(),
        kind: model.kind(),
        config: model.config().clone(),
        blob: BlobEntry {
            file: PARAMS_FILE.into(),
            sha256: sha256_hex(&bytes),
        },
        params,
    };
    let blob_path = dir.join(PARAMS_FILE);
    fs::write(&blob_path, &bytes).map_err(io(&blob_path))?;
    let mut text = serde_json::to_string_pretty(&manifest).expect("checkpoint serializes");
    text.push('\n');
    let path = dir.join(CHECKPOINT_FILE);
    fs::write(&path, text).map_err(io(&path))
}

pub fn load_checkpoint(dir: &Path) -> Result<AdapterModel, FormatError> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&path).map_err(|source| FormatError::Io { path, source })?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| FormatError::Manifest(e.to_string()))?;
    if m.format != CHECKPOINT_TAG {
        return Err(FormatError::UnsupportedFormat(m.format));
    }
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(|source| FormatError::Io { path, source })?;
    let mut total = 0;
    for p in &m.params {
        if p.offset != total {
            return Err(FormatError::Manifest(format!("parameter {} starts at {}, expected {total}", p.name, p.offset)));
        }
        total += p.shape.iter().product::<usize>();
    }
    if bytes.len() != 8 * total {
        return Err(FormatError::CountMismatch {
            file: PARAMS_FILE.into(),
            expected: 8 * total as u64,
            actual: bytes.len() as u64,
        });
    }
    let actual = sha256_hex(&bytes);
    if actual != m.blob.sha256 {
        return Err(FormatError::Checksum {
            file: PARAMS_FILE.into(),
            expected: m.blob.sha256,
            actual,
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let listed: Vec<(String, Vec<usize>, Vec<f64>)> = m
        .params
        .iter()
        .map(|p| {
            let n: usize = p.shape.iter().product();
            (p.name.clone(), p.shape.clone(), values[p.offset..p.offset + n].to_vec())
        })
        .collect();
    let bad = |e: mma_core::ConfigError| FormatError::Manifest(e.to_string());
    // the initial values are overwritten, so the seed is irrelevant
    let mut model = AdapterModel::new(m.kind, m.config, 0).map_err(bad)?;
    model.load_parameters(&listed).map_err(bad)?;
    Ok(model)
}
