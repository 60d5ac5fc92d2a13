//! Single-file checkpoint: a magic tag, a length-prefixed JSON manifest
//! (tensor names, shapes, byte offsets, config, vocab, history), then the
//! raw little-endian f32 payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Checkpoint, EpochStats, TrainConfig};
use crate::params::{Param, ParamSet};
use crate::text::{TextError, Vocab};

const MAGIC: &[u8; 8] = b"RWLCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Vocab(#[from] TextError),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    /// Number of f32 values.
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: TrainConfig,
    vocab: Vec<String>,
    history: Vec<EpochStats>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };

    let mut tensors = Vec::with_capacity(ckpt.params.len());
    let mut payload: Vec<u8> = Vec::with_capacity(ckpt.params.total_values() * 4);
    for (name, param) in ckpt.params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: param.shape.clone(),
            offset: payload.len(),
            len: param.values.len(),
        });
        for v in &param.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: ckpt.config.clone(),
        vocab: ckpt.vocab.words().to_vec(),
        history: ckpt.history.clone(),
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes()).map_err(io_err)?;
    file.write_all(&manifest_bytes).map_err(io_err)?;
    file.write_all(&payload).map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(io_err)?.read_to_end(&mut bytes).map_err(io_err)?;

    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::Corrupt("missing or unknown file magic".into()));
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&bytes[8..16]);
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let manifest_end = 16usize
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| CheckpointError::Corrupt("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])?;
    if manifest.version != FORMAT_VERSION {
        return Err(CheckpointError::Version(manifest.version));
    }

    let payload = &bytes[manifest_end..];
    let mut params = ParamSet::new();
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        if numel != entry.len {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {} shape {:?} does not hold {} values",
                entry.name, entry.shape, entry.len
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.len * 4)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| {
                CheckpointError::Corrupt(format!("truncated payload for tensor {}", entry.name))
            })?;
        let values: Vec<f32> = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(&entry.name, Param { shape: entry.shape.clone(), values });
    }

    Ok(Checkpoint {
        config: manifest.config,
        params,
        vocab: Vocab::from_words(manifest.vocab)?,
        history: manifest.history,
    })
}
