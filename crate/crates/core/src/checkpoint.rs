//! Tensor archives: a JSON manifest next to one little-endian float blob.
//!
//! Model checkpoints use 32-bit floats. Resumable training state uses the
//! same layout with 64-bit floats so a resumed run continues exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ehr::Task;
use crate::model::{ModelConfig, ParamMap};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: Dtype,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub total_bytes: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
}

impl Manifest {
    fn check(&self, path: &Path, blob_len: usize) -> Result<()> {
        let bad = |msg: String| CheckpointError::Invalid {
            path: path.to_path_buf(),
            msg,
        };
        if self.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", self.format_version)));
        }
        let mut next = 0;
        for t in &self.tensors {
            let want = self.dtype.width() * t.shape.iter().product::<usize>();
            if t.offset != next || t.bytes != want {
                return Err(bad(format!("tensor {} has offset {} and {} bytes, expected {next} and {want}", t.name, t.offset, t.bytes)));
            }
            next += want;
        }
        if next != self.total_bytes || blob_len != self.total_bytes {
            return Err(bad(format!("blob holds {blob_len} bytes, manifest sums to {next} and records {}", self.total_bytes)));
        }
        Ok(())
    }
}

/// Path of the blob that sits next to `manifest`.
fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `tensors` to `manifest` (JSON) and a sibling `.bin` blob.
pub fn save(manifest: &Path, tensors: &ParamMap, dtype: Dtype, task: Option<Task>, model: Option<&ModelConfig>) -> Result<Manifest> {
    let blob = blob_path(manifest);
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = bytes.len();
        for v in t.data() {
            match dtype {
                Dtype::F32 => bytes.extend_from_slice(&(*v as f32).to_le_bytes()),
                Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
            }
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            bytes: bytes.len() - offset,
        });
    }
    let m = Manifest {
        format_version: FORMAT_VERSION,
        dtype,
        blob: blob.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
        total_bytes: bytes.len(),
        tensors: entries,
        task,
        model: model.cloned(),
    };
    if let Some(dir) = manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&blob, &bytes)?;
    fs::write(manifest, serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(m)
}

/// Reads a manifest and its blob back into named tensors.
pub fn load(manifest: &Path) -> Result<(Manifest, ParamMap)> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(manifest)?)?;
    let blob = manifest.with_file_name(&m.blob);
    let bytes = fs::read(&blob)?;
    m.check(manifest, bytes.len())?;
    let mut out = ParamMap::new();
    for t in &m.tensors {
        let raw = &bytes[t.offset..t.offset + t.bytes];
        let data: Vec<f64> = match m.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        };
        let tensor = Tensor::new(t.shape.clone(), data).map_err(|e| CheckpointError::Invalid {
            path: manifest.to_path_buf(),
            msg: e.to_string(),
        })?;
        if out.insert(t.name.clone(), tensor).is_some() {
            return Err(CheckpointError::Invalid {
                path: manifest.to_path_buf(),
                msg: format!("duplicate tensor {}", t.name),
            });
        }
    }
    Ok((m, out))
}
