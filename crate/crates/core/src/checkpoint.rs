//! Versioned single-file checkpoint archive.
//!
//! Layout:
//!
//! ```text
//! GRANAGE-CKPT-1\n
//! u64 LE   header length
//! [u8]     JSON header (model spec, tensor names/shapes, epoch, generator
//!          state, optimizer kind/step, history)
//! u64 LE   float count
//! [f32 LE] parameters in header order, then optimizer moments
//! [u8;32]  SHA-256 of everything above
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Model, ModelError, ModelSpec, Param};
use crate::train::{Optimizer, OptimizerKind, TrainHistory};

pub const MAGIC_PREFIX: &str = "GRANAGE-CKPT-";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: not a checkpoint file", .0.display())]
    NotACheckpoint(PathBuf),
    #[error("{}: checkpoint format version {found}, this build reads version {expected}", path.display())]
    VersionMismatch {
        path: PathBuf,
        found: String,
        expected: u32,
    },
    #[error("{}: checkpoint is truncated", .0.display())]
    Truncated(PathBuf),
    #[error("{}: checkpoint is corrupt: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Training-stream position: all draws are keyed by `(seed, epoch, ...)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_spec: ModelSpec,
    pub params: Vec<Param>,
    pub optimizer: Optimizer,
    pub history: TrainHistory,
    pub rng: RngState,
    /// Completed epochs.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_spec: ModelSpec,
    tensors: Vec<TensorMeta>,
    epoch: usize,
    rng: RngState,
    optimizer: OptimizerKind,
    optimizer_step: u64,
    moment_buffers: usize,
    history: TrainHistory,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let truncated = || CheckpointError::Truncated(self.path.to_path_buf());
        let end = self.pos.checked_add(n).ok_or_else(truncated)?;
        let slice = self.bytes.get(self.pos..end).ok_or_else(truncated)?;
        self.pos = end;
        Ok(slice)
    }
}

impl Checkpoint {
    pub fn capture(model: &Model, optimizer: &Optimizer, history: &TrainHistory, rng: RngState) -> Self {
        Self {
            model_spec: model.spec().clone(),
            params: model.params().iter().cloned().collect(),
            optimizer: optimizer.clone(),
            history: history.clone(),
            rng,
            epoch: history.len(),
        }
    }

    pub fn model(&self) -> Result<Model, ModelError> {
        Model::from_params(&self.model_spec, &self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model_spec: self.model_spec.clone(),
            tensors: self
                .params
                .iter()
                .map(|p| TensorMeta {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
            epoch: self.epoch,
            rng: self.rng,
            optimizer: self.optimizer.kind,
            optimizer_step: self.optimizer.step,
            moment_buffers: self.optimizer.moments.len(),
            history: self.history.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let floats: Vec<f32> = self
            .params
            .iter()
            .flat_map(|p| p.data.iter().copied())
            .chain(self.optimizer.moments.iter().flatten().copied())
            .collect();

        let mut out = Vec::with_capacity(64 + header.len() + 4 * floats.len());
        out.extend_from_slice(format!("{MAGIC_PREFIX}{FORMAT_VERSION}\n").as_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(floats.len() as u64).to_le_bytes());
        for f in floats {
            out.extend_from_slice(&f.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, CheckpointError> {
        let corrupt = |reason: &str| CheckpointError::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let truncated = || CheckpointError::Truncated(path.to_path_buf());

        let newline = bytes
            .iter()
            .take(64)
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::NotACheckpoint(path.to_path_buf()))?;
        let magic =
            std::str::from_utf8(&bytes[..newline]).map_err(|_| CheckpointError::NotACheckpoint(path.to_path_buf()))?;
        let version = magic
            .strip_prefix(MAGIC_PREFIX)
            .ok_or_else(|| CheckpointError::NotACheckpoint(path.to_path_buf()))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(CheckpointError::VersionMismatch {
                path: path.to_path_buf(),
                found: version.to_string(),
                expected: FORMAT_VERSION,
            });
        }

        let mut cursor = Cursor {
            bytes,
            pos: newline + 1,
            path,
        };
        let header_len = u64::from_le_bytes(cursor.take(8)?.try_into().unwrap()) as usize;
        let header_bytes = cursor.take(header_len)?;
        let float_count = u64::from_le_bytes(cursor.take(8)?.try_into().unwrap()) as usize;
        let float_bytes = cursor.take(float_count.checked_mul(4).ok_or_else(truncated)?)?;
        let body_end = cursor.pos;
        let digest = cursor.take(32)?;
        if cursor.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }

        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| corrupt(&e.to_string()))?;
        let mut floats = float_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut params = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            if data.len() != n {
                return Err(corrupt("parameter data shorter than declared"));
            }
            params.push(Param {
                name: t.name,
                shape: t.shape,
                data,
            });
        }
        let mut moments = Vec::with_capacity(header.moment_buffers);
        for i in 0..header.moment_buffers {
            let n = params
                .get(i / 2)
                .map(Param::len)
                .ok_or_else(|| corrupt("orphan moment buffer"))?;
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            if data.len() != n {
                return Err(corrupt("optimizer data shorter than declared"));
            }
            moments.push(data);
        }
        if floats.next().is_some() {
            return Err(corrupt("unused float data"));
        }
        Ok(Self {
            model_spec: header.model_spec,
            params,
            optimizer: Optimizer {
                kind: header.optimizer,
                step: header.optimizer_step,
                moments,
            },
            history: header.history,
            rng: header.rng,
            epoch: header.epoch,
        })
    }

    /// Writes via a temporary file and rename, so an existing checkpoint is
    /// never left half-written.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(io)?;
            f.write_all(&self.to_bytes()).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}
