//! The MMEB-v1 on-disk embedding store.
//!
//! A store is a directory holding
//!
//! | file                  | contents                                              |
//! |-----------------------|-------------------------------------------------------|
//! | `manifest.json`       | format tag, dataset id, width, class names, prompt template, per-split counts, SHA-256 of every blob |
//! | `text.f32`            | `classes x emb_dim` prompt embeddings                 |
//! | `<split>.images.f32`  | `count x emb_dim` image embeddings, `split` in `train`, `test` |
//! | `<split>.labels.u32`  | `count` class indices                                 |
//!
//! Matrices are row-major. Every float is an IEEE-754 binary32 and every
//! label an unsigned 32-bit integer, both little-endian, with no header or
//! padding. The manifest is pretty-printed JSON with a trailing newline and
//! keys in the order of the structs below, so saving the same store twice
//! writes identical bytes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use mma_core::store::{ImageSplit, SplitKind, UNIT_NORM_TOL};
use mma_core::{DataError, EmbeddingStore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const FORMAT_TAG: &str = "MMEB-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEXT_FILE: &str = "text.f32";

pub fn images_file(split: SplitKind) -> String {
    format!("{}.images.f32", split.name())
}

pub fn labels_file(split: SplitKind) -> String {
    format!("{}.labels.u32", split.name())
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("unsupported store format {0:?}, expected {FORMAT_TAG}")]
    UnsupportedFormat(String),
    #[error("{file}: {actual} bytes, manifest implies {expected}")]
    CountMismatch { file: String, expected: u64, actual: u64 },
    #[error("{file}: rows are {found} wide, manifest emb_dim is {expected}")]
    ShapeMismatch { file: String, expected: usize, found: usize },
    #[error("{file}: checksum {actual} does not match manifest {expected}")]
    Checksum { file: String, expected: String, actual: String },
    #[error("{file}: row {row} contains a non-finite value")]
    NonFinite { file: String, row: usize },
    #[error("{file}: row {row} has norm {norm}, expected 1 within {UNIT_NORM_TOL}")]
    NotNormalized { file: String, row: usize, norm: f64 },
    #[error("{file}: row {row} has label {label} but there are {classes} classes")]
    LabelOutOfRange { file: String, row: usize, label: u32, classes: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

impl FormatError {
    fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub count: usize,
    pub images: BlobEntry,
    pub labels: BlobEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntries {
    pub train: SplitEntry,
    pub test: SplitEntry,
}

impl SplitEntries {
    pub fn get(&self, kind: SplitKind) -> &SplitEntry {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub dataset_id: String,
    pub emb_dim: usize,
    pub class_names: Vec<String>,
    pub prompt_template: String,
    pub text: BlobEntry,
    pub splits: SplitEntries,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_f32(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

pub fn encode_u32(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect()
}

fn decode_u32(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

/// Blob contents keyed by file name, in write order.
pub fn encode_store(store: &EmbeddingStore) -> (Manifest, Vec<(String, Vec<u8>)>) {
    let mut blobs = Vec::new();
    let mut entry = |file: String, bytes: Vec<u8>| {
        let e = BlobEntry {
            file: file.clone(),
            sha256: sha256_hex(&bytes),
        };
        blobs.push((file, bytes));
        e
    };
    let text = entry(TEXT_FILE.to_string(), encode_f32(&store.text));
    let mut split = |kind: SplitKind| {
        let s = store.split(kind);
        SplitEntry {
            count: s.labels.len(),
            images: entry(images_file(kind), encode_f32(&s.images)),
            labels: entry(labels_file(kind), encode_u32(&s.labels)),
        }
    };
    let splits = SplitEntries {
        train: split(SplitKind::Train),
        test: split(SplitKind::Test),
    };
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        dataset_id: store.dataset_id.clone(),
        emb_dim: store.emb_dim,
        class_names: store.class_names.clone(),
        prompt_template: store.prompt_template.clone(),
        text,
        splits,
    };
    (manifest, blobs)
}

pub fn manifest_bytes(manifest: &Manifest) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    s.push('\n');
    s.into_bytes()
}

/// Writes `store` into `dir`, creating it if needed. Existing store files
/// are overwritten.
pub fn save_store(store: &EmbeddingStore, dir: &Path) -> Result<(), FormatError> {
    store.validate()?;
    fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    let (manifest, blobs) = encode_store(store);
    for (file, bytes) in &blobs {
        let path = dir.join(file);
        fs::write(&path, bytes).map_err(|e| FormatError::io(&path, e))?;
    }
    // the manifest goes last so a half-written store fails its checksums
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest_bytes(&manifest)).map_err(|e| FormatError::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, FormatError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| FormatError::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| FormatError::Manifest(e.to_string()))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(FORMAT_TAG) => {}
        Some(other) => return Err(FormatError::UnsupportedFormat(other.to_string())),
        None => return Err(FormatError::Manifest("missing \"format\" tag".into())),
    }
    serde_json::from_value(value).map_err(|e| FormatError::Manifest(e.to_string()))
}

struct FloatBlob<'a> {
    entry: &'a BlobEntry,
    rows: usize,
    bytes: Vec<u8>,
}

/// Rejects any blob whose size disagrees with the manifest. When every
/// non-empty float blob implies the same whole-number row width and that
/// width differs from `emb_dim`, the manifest's width is wrong and the error
/// is a shape error; otherwise the offending blob has the wrong row count.
fn check_float_sizes(blobs: &[FloatBlob<'_>], emb_dim: usize) -> Result<(), FormatError> {
    let width = |b: &FloatBlob<'_>| {
        let per_row = 4 * b.rows as u64;
        let len = b.bytes.len() as u64;
        (b.rows > 0 && len.is_multiple_of(per_row)).then_some((len / per_row) as usize)
    };
    let non_empty: Vec<&FloatBlob<'_>> = blobs.iter().filter(|b| b.rows > 0).collect();
    let widths: Vec<Option<usize>> = non_empty.iter().map(|b| width(b)).collect();
    if let Some(Some(w)) = widths.first() {
        if *w != emb_dim && widths.iter().all(|x| *x == Some(*w)) {
            return Err(FormatError::ShapeMismatch {
                file: non_empty[0].entry.file.clone(),
                expected: emb_dim,
                found: *w,
            });
        }
    }
    for b in blobs {
        let expected = 4 * (b.rows * emb_dim) as u64;
        if b.bytes.len() as u64 != expected {
            return Err(FormatError::CountMismatch {
                file: b.entry.file.clone(),
                expected,
                actual: b.bytes.len() as u64,
            });
        }
    }
    Ok(())
}

fn check_checksum(entry: &BlobEntry, bytes: &[u8]) -> Result<(), FormatError> {
    let actual = sha256_hex(bytes);
    if actual != entry.sha256 {
        return Err(FormatError::Checksum {
            file: entry.file.clone(),
            expected: entry.sha256.clone(),
            actual,
        });
    }
    Ok(())
}

fn check_unit_rows(file: &str, values: &[f64], dim: usize) -> Result<(), FormatError> {
    for (row, r) in values.chunks(dim).enumerate() {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite { file: file.into(), row });
        }
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(FormatError::NotNormalized { file: file.into(), row, norm });
        }
    }
    Ok(())
}

fn read_blob(dir: &Path, entry: &BlobEntry) -> Result<Vec<u8>, FormatError> {
    if entry.file.contains(['/', '\\']) || entry.file == ".." {
        return Err(FormatError::Manifest(format!("blob name {:?} leaves the store directory", entry.file)));
    }
    let path = dir.join(&entry.file);
    fs::read(&path).map_err(|e| FormatError::io(&path, e))
}

/// Loads and fully validates a store. Checks happen in the order sizes,
/// checksums, then values, so each corruption maps to one error kind.
pub fn load_store(dir: &Path) -> Result<EmbeddingStore, FormatError> {
    let m = read_manifest(dir)?;
    if m.emb_dim == 0 {
        return Err(FormatError::Manifest("emb_dim must be positive".into()));
    }
    let classes = m.class_names.len();
    let mut floats = vec![FloatBlob {
        entry: &m.text,
        rows: classes,
        bytes: read_blob(dir, &m.text)?,
    }];
    for kind in SplitKind::ALL {
        let s = m.splits.get(kind);
        floats.push(FloatBlob {
            entry: &s.images,
            rows: s.count,
            bytes: read_blob(dir, &s.images)?,
        });
    }
    let mut labels = Vec::new();
    for kind in SplitKind::ALL {
        let s = m.splits.get(kind);
        labels.push((s, read_blob(dir, &s.labels)?));
    }

    check_float_sizes(&floats, m.emb_dim)?;
    for (s, bytes) in &labels {
        let expected = 4 * s.count as u64;
        if bytes.len() as u64 != expected {
            return Err(FormatError::CountMismatch {
                file: s.labels.file.clone(),
                expected,
                actual: bytes.len() as u64,
            });
        }
    }
    for b in &floats {
        check_checksum(b.entry, &b.bytes)?;
    }
    for (s, bytes) in &labels {
        check_checksum(&s.labels, bytes)?;
    }

    let values: Vec<Vec<f64>> = floats.iter().map(|b| decode_f32(&b.bytes)).collect();
    for (b, v) in floats.iter().zip(&values) {
        check_unit_rows(&b.entry.file, v, m.emb_dim)?;
    }
    let decoded: Vec<Vec<u32>> = labels.iter().map(|(_, b)| decode_u32(b)).collect();
    for ((s, _), l) in labels.iter().zip(&decoded) {
        if let Some((row, &label)) = l.iter().enumerate().find(|(_, &x)| x as usize >= classes) {
            return Err(FormatError::LabelOutOfRange {
                file: s.labels.file.clone(),
                row,
                label,
                classes,
            });
        }
    }

    let mut values = values.into_iter();
    let mut decoded = decoded.into_iter();
    let text = values.next().expect("text blob");
    let mut split = || ImageSplit {
        images: values.next().expect("image blob"),
        labels: decoded.next().expect("label blob"),
    };
    let (train, test) = (split(), split());
    Ok(EmbeddingStore::new(m.dataset_id, m.emb_dim, m.class_names, m.prompt_template, text, train, test)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mma_core::store::{generate_synthetic, SyntheticSpec};

    fn toy() -> EmbeddingStore {
        generate_synthetic(&SyntheticSpec::new(3, 4, 8, 2.0, 1)).unwrap()
    }

    #[test]
    fn encoding_is_little_endian() {
        assert_eq!(encode_f32(&[1.0]), vec![0x00, 0x00, 0x80, 0x3f]);
        assert_eq!(encode_u32(&[258]), vec![2, 1, 0, 0]);
        assert_eq!(decode_u32(&encode_u32(&[7, u32::MAX])), vec![7, u32::MAX]);
    }

    #[test]
    fn manifest_lists_every_blob() {
        let (m, blobs) = encode_store(&toy());
        assert_eq!(m.format, FORMAT_TAG);
        assert_eq!(m.splits.train.count, 12);
        let names: Vec<&str> = blobs.iter().map(|(f, _)| f.as_str()).collect();
        assert_eq!(
            names,
            ["text.f32", "train.images.f32", "train.labels.u32", "test.images.f32", "test.labels.u32"]
        );
        assert_eq!(blobs[0].1.len(), 3 * 8 * 4);
    }

    #[test]
    fn width_inference_distinguishes_truncation() {
        let e = BlobEntry {
            file: "x".into(),
            sha256: String::new(),
        };
        let blob = |rows, len| FloatBlob {
            entry: &e,
            rows,
            bytes: vec![0; len],
        };
        // one blob truncated to half: the others still agree with emb_dim
        let r = check_float_sizes(&[blob(2, 64), blob(4, 64), blob(4, 128)], 8);
        assert!(matches!(r, Err(FormatError::CountMismatch { .. })));
        // every blob is 4 wide
        let r = check_float_sizes(&[blob(2, 32), blob(4, 64), blob(0, 0)], 8);
        assert!(matches!(r, Err(FormatError::ShapeMismatch { found: 4, .. })));
        assert!(check_float_sizes(&[blob(2, 64), blob(0, 0)], 8).is_ok());
    }
}
