//! On-disk model checkpoints.
//!
//! A checkpoint is a directory with `manifest.json` (format version, the run
//! config, tensor names, shapes, byte ranges and CRC-32s) and `tensors.bin`
//! (a short header followed by each tensor as little-endian `f32`).
//! Parameters are held as `f64` in memory and quantized on save, so
//! `save(load(save(p)))` reproduces the first file byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::model::ModelParams;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "tensors.bin";
pub const FORMAT_VERSION: u32 = 1;
/// First bytes of `tensors.bin`, followed by the version as `u32` LE.
pub const PAYLOAD_MAGIC: &[u8; 8] = b"SELATTN\x01";
const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("{path}: bad magic")]
    BadMagic { path: PathBuf },
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("tensor {tensor}: shape {found:?} does not match the config ({expected:?})")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {tensor}: listed in the manifest but not expected by the model")]
    UnknownTensor { tensor: String },
    #[error("tensor {tensor}: expected by the model but missing from the manifest")]
    MissingTensor { tensor: String },
    #[error("tensor {tensor}: payload truncated (needs bytes {start}..{end}, file has {len})")]
    Truncated {
        tensor: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("tensor {tensor}: checksum mismatch, payload is corrupted")]
    Checksum { tensor: String },
    #[error("tensor {tensor}: byte range does not match its shape or the previous tensor")]
    Layout { tensor: String },
    #[error("{len} trailing payload bytes not claimed by any tensor")]
    TrailingBytes { len: usize },
}

impl CheckpointError {
    /// True when the failure is a missing file rather than bad content.
    pub fn is_not_found(&self) -> bool {
        matches!(self, CheckpointError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `tensors.bin`.
    pub offset: usize,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub step: usize,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub params: ModelParams,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Round every parameter through `f32`, the precision stored on disk.
pub fn quantize(params: &mut ModelParams) {
    for t in params.tensors_mut() {
        for v in t {
            *v = *v as f32 as f64;
        }
    }
}

fn encode(params: &ModelParams) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut payload = Vec::with_capacity(HEADER_LEN + 4 * params.parameter_count());
    payload.extend_from_slice(PAYLOAD_MAGIC);
    payload.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut entries = Vec::new();
    for (name, shape, values) in params.tensors() {
        let offset = payload.len();
        for &v in values {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape,
            offset,
            crc32: crc32fast::hash(&payload[offset..]),
        });
    }
    (payload, entries)
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (payload, tensors) = encode(&ckpt.params);
    let manifest = Manifest {
        version: FORMAT_VERSION,
        step: ckpt.step,
        config: ckpt.config.clone(),
        tensors,
    };
    let payload_path = dir.join(PAYLOAD_FILE);
    fs::write(&payload_path, payload).map_err(io_err(&payload_path))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(io_err(&manifest_path))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    // Peek at the version first so an old or future file gets a version
    // error rather than a schema complaint.
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    match raw.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(CheckpointError::Version { found: v as u32 }),
        None => {
            return Err(CheckpointError::Manifest {
                path,
                msg: "missing integer field `version`".into(),
            })
        }
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| CheckpointError::Manifest {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    manifest.config.validate()?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let manifest = read_manifest(dir)?;
    let payload_path = dir.join(PAYLOAD_FILE);
    let payload = fs::read(&payload_path).map_err(io_err(&payload_path))?;
    if payload.len() < HEADER_LEN || &payload[..8] != PAYLOAD_MAGIC {
        return Err(CheckpointError::BadMagic { path: payload_path });
    }
    let version = u32::from_le_bytes(payload[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }

    let mut params = ModelParams::zeros(&manifest.config.shape());
    let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    for e in &manifest.tensors {
        if !expected.iter().any(|(n, _)| n == &e.name) {
            return Err(CheckpointError::UnknownTensor { tensor: e.name.clone() });
        }
    }
    let mut cursor = HEADER_LEN;
    for ((name, shape), dst) in expected.iter().zip(params.tensors_mut()) {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| CheckpointError::MissingTensor { tensor: name.clone() })?;
        if &entry.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                tensor: name.clone(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
        if entry.offset != cursor {
            return Err(CheckpointError::Layout { tensor: name.clone() });
        }
        let end = entry.offset + 4 * dst.len();
        if end > payload.len() {
            return Err(CheckpointError::Truncated {
                tensor: name.clone(),
                start: entry.offset,
                end,
                len: payload.len(),
            });
        }
        let bytes = &payload[entry.offset..end];
        if crc32fast::hash(bytes) != entry.crc32 {
            return Err(CheckpointError::Checksum { tensor: name.clone() });
        }
        for (d, c) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64;
        }
        cursor = end;
    }
    if cursor != payload.len() {
        return Err(CheckpointError::TrailingBytes {
            len: payload.len() - cursor,
        });
    }
    Ok(Checkpoint {
        config: manifest.config,
        step: manifest.step,
        params,
    })
}
