//! Checkpoints as a JSON manifest plus a little-endian `f64` blob.
//!
//! `<stem>.manifest.json` describes every tensor and `<stem>.bin` holds
//! the values back to back. Both files are written to a temporary file in
//! the target directory and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hiergnn_core::corpus::Vocabulary;
use hiergnn_core::linalg::Matrix;
use hiergnn_core::model::{Model, ModelConfig};
use hiergnn_core::params::ParamStore;
use hiergnn_core::reasoning::Mode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64le";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("unsupported checkpoint format version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: (usize, usize),
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub d: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub mode: Mode,
    pub vocab_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub step: u64,
    pub config: ModelConfig,
    /// Surface forms of the token ids, when the model was trained on text.
    #[serde(default)]
    pub vocab: Option<Vec<String>>,
    pub tensors: Vec<TensorEntry>,
}

/// A model together with the run metadata stored next to it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub step: u64,
    pub vocab: Option<Vocabulary>,
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".manifest.json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".bin")
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Writes `<stem>.bin` then `<stem>.manifest.json`. A reader that finds
/// the manifest therefore always finds the matching blob.
pub fn save_checkpoint(ck: &Checkpoint, stem: &Path) -> Result<(), StoreError> {
    let mut blob = Vec::with_capacity(ck.model.params.numel() * 8);
    let mut tensors = Vec::with_capacity(ck.model.params.len());
    for (name, t) in ck.model.params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape(),
            dtype: DTYPE.into(),
            byte_offset: blob.len() as u64,
        });
        for v in t.as_slice() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let cfg = &ck.model.config;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        d: cfg.d,
        layers: cfg.layers,
        mode: cfg.mode,
        vocab_size: cfg.vocab_size,
        seed: ck.seed,
        step: ck.step,
        config: cfg.clone(),
        vocab: ck.vocab.as_ref().map(|v| v.words().to_vec()),
        tensors,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&blob_path(stem), &blob)?;
    write_atomic(&manifest_path(stem), &json)
}

fn corrupt(msg: impl Into<String>) -> StoreError {
    StoreError::CorruptCheckpoint(msg.into())
}

pub fn read_manifest(stem: &Path) -> Result<Manifest, StoreError> {
    let path = manifest_path(stem);
    let text = fs::read(&path).map_err(io_err(&path))?;
    if text.is_empty() {
        return Err(corrupt(format!("{} is empty", path.display())));
    }
    let raw: serde_json::Value =
        serde_json::from_slice(&text).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    let version = raw.get("format_version").and_then(serde_json::Value::as_u64);
    match version {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => return Err(StoreError::UnsupportedVersion { found: v as u32 }),
        None => return Err(corrupt("manifest has no format_version")),
    }
    serde_json::from_value(raw).map_err(|e| corrupt(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(stem: &Path) -> Result<Checkpoint, StoreError> {
    let manifest = read_manifest(stem)?;
    let cfg = manifest.config.clone();
    if (cfg.d, cfg.layers, cfg.mode, cfg.vocab_size) != (manifest.d, manifest.layers, manifest.mode, manifest.vocab_size)
    {
        return Err(corrupt("header fields disagree with the stored config"));
    }
    let path = blob_path(stem);
    let blob = fs::read(&path).map_err(io_err(&path))?;
    if blob.is_empty() {
        return Err(corrupt(format!("{} is empty", path.display())));
    }

    let expected = Model::expected_shapes(&cfg).map_err(|e| corrupt(e.to_string()))?;
    let mut spans: Vec<(u64, u64)> = Vec::new();
    for t in &manifest.tensors {
        if t.dtype != DTYPE {
            return Err(corrupt(format!("{} has dtype {}", t.name, t.dtype)));
        }
        let len = (t.shape.0 * t.shape.1 * 8) as u64;
        spans.push((t.byte_offset, t.byte_offset + len));
        if !expected.iter().any(|(n, _)| *n == t.name) {
            log::warn!("ignoring unknown tensor {} in checkpoint", t.name);
        }
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(corrupt("tensor byte ranges overlap"));
    }

    let mut params = ParamStore::new();
    for (name, shape) in &expected {
        let mut entries = manifest.tensors.iter().filter(|t| t.name == *name);
        let entry = entries.next().ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        if entries.next().is_some() {
            return Err(corrupt(format!("tensor {name} listed twice")));
        }
        if entry.shape != *shape {
            return Err(corrupt(format!("{name} has shape {:?}, expected {shape:?}", entry.shape)));
        }
        let start = entry.byte_offset as usize;
        let end = start + shape.0 * shape.1 * 8;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| corrupt(format!("blob truncated inside {name} ({} bytes)", blob.len())))?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let m = Matrix::new(shape.0, shape.1, values).map_err(|e| corrupt(format!("{name}: {e}")))?;
        params.insert(name, m);
    }
    Ok(Checkpoint {
        model: Model { config: cfg, params },
        seed: manifest.seed,
        step: manifest.step,
        vocab: manifest.vocab.map(Vocabulary::from_words),
    })
}
