//! Binary checkpoint format.
//!
//! Layout: magic `ADCW`, version u32, length-prefixed UTF-8 config JSON, then
//! a sequence of arrays until EOF. Each array is `(name_len: u32, name,
//! dtype: u8 {0 = f32, 1 = f64}, rank: u32, dims: u32[rank], raw
//! little-endian data)`. Every psi/theta parameter (and baseline buffer)
//! appears exactly once under its canonical name, in canonical order, so a
//! save/load/save round-trip is byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{self, ArchConfig, ModelError, ModelKind, ModelState, ParamGroup};
use crate::norm::{GbnParams, NormError};
use crate::train::TrainConfig;

pub const MAGIC: [u8; 4] = *b"ADCW";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: String },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint holds {got}, expected {expected}")]
    WrongContents {
        expected: &'static str,
        got: &'static str,
    },
    #[error("checkpoint array {0} missing")]
    MissingArray(String),
    #[error("checkpoint array {0} not part of this architecture")]
    UnexpectedArray(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Norm(#[from] NormError),
}

/// What a checkpoint file stores, embedded as its config JSON.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckpointConfig {
    Guided {
        arch: ArchConfig,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        train: Option<TrainConfig>,
    },
    BnBaseline {
        arch: ArchConfig,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        train: Option<TrainConfig>,
    },
    /// A single predicted parameter vector from `adapt`.
    Phi {
        arch: ArchConfig,
        k: usize,
        seed: u64,
    },
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(config: &CheckpointConfig) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let json = serde_json::to_string(config).expect("checkpoint config serializes");
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(json.as_bytes());
        Writer { buf }
    }

    fn array_f64(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.buf
            .extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.push(DTYPE_F64);
        self.buf
            .extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            self.buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PersistError> {
        if self.pos + n > self.bytes.len() {
            return Err(PersistError::Corrupt(format!(
                "{}: truncated at byte {} (wanted {n} more)",
                self.path, self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PersistError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8, PersistError> {
        Ok(self.take(1)?[0])
    }

    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }
}

#[derive(Debug)]
struct RawArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn read_arrays(r: &mut Reader) -> Result<Vec<RawArray>, PersistError> {
    let mut arrays = Vec::new();
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| PersistError::Corrupt(format!("{}: non-UTF8 array name", r.path)))?;
        let dtype = r.u8()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = match dtype {
            DTYPE_F64 => {
                let raw = r.take(numel * 8)?;
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                    .collect()
            }
            DTYPE_F32 => {
                let raw = r.take(numel * 4)?;
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect()
            }
            other => {
                return Err(PersistError::Corrupt(format!(
                    "{}: unknown dtype tag {other} for array {name}",
                    r.path
                )))
            }
        };
        arrays.push(RawArray { name, shape, data });
    }
    Ok(arrays)
}

fn parse_header<'a>(
    bytes: &'a [u8],
    path: &Path,
) -> Result<(CheckpointConfig, Reader<'a>), PersistError> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(4)? != MAGIC {
        return Err(PersistError::BadMagic { path: r.path });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(PersistError::UnsupportedVersion(version));
    }
    let json_len = r.u32()? as usize;
    let json = std::str::from_utf8(r.take(json_len)?)
        .map_err(|_| PersistError::Corrupt(format!("{}: non-UTF8 config", path.display())))?;
    let config: CheckpointConfig = serde_json::from_str(json)
        .map_err(|e| PersistError::Corrupt(format!("{}: {e}", path.display())))?;
    Ok((config, r))
}

/// Read only the embedded config of a checkpoint.
pub fn peek_config(path: &Path) -> Result<CheckpointConfig, PersistError> {
    let bytes = fs::read(path)?;
    Ok(parse_header(&bytes, path)?.0)
}

/// Write a model checkpoint (all parameters in f64).
pub fn save_model(
    path: &Path,
    model: &ModelState,
    train: Option<&TrainConfig>,
) -> Result<(), PersistError> {
    let config = match model.kind {
        ModelKind::Guided => CheckpointConfig::Guided {
            arch: model.arch.clone(),
            train: train.cloned(),
        },
        ModelKind::BnBaseline => CheckpointConfig::BnBaseline {
            arch: model.arch.clone(),
            train: train.cloned(),
        },
    };
    let mut w = Writer::new(&config);
    for group in [&model.psi, &model.theta, &model.buffers] {
        for (name, t) in group.entries() {
            w.array_f64(name, t.shape(), t.data());
        }
    }
    fs::write(path, w.buf)?;
    Ok(())
}

fn fill_group(group: &mut ParamGroup, arrays: &mut Vec<RawArray>) -> Result<(), PersistError> {
    let names: Vec<String> = group.entries().iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let idx = arrays
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| PersistError::MissingArray(name.clone()))?;
        let raw = arrays.swap_remove(idx);
        let t = group.get_mut(&name).expect("name from this group");
        if raw.shape != t.shape() {
            return Err(PersistError::Corrupt(format!(
                "array {name} has shape {:?}, expected {:?}",
                raw.shape,
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&raw.data);
    }
    Ok(())
}

/// Load a model checkpoint, reproducing parameters bitwise.
pub fn load_model(path: &Path) -> Result<(ModelState, Option<TrainConfig>), PersistError> {
    let bytes = fs::read(path)?;
    let (config, mut r) = parse_header(&bytes, path)?;
    let (arch, train, kind) = match config {
        CheckpointConfig::Guided { arch, train } => (arch, train, ModelKind::Guided),
        CheckpointConfig::BnBaseline { arch, train } => (arch, train, ModelKind::BnBaseline),
        CheckpointConfig::Phi { .. } => {
            return Err(PersistError::WrongContents {
                expected: "model checkpoint",
                got: "phi vector file",
            })
        }
    };
    let mut arrays = read_arrays(&mut r)?;
    // Skeleton with canonical names/shapes; every value is overwritten below.
    let mut model = match kind {
        ModelKind::Guided => models::build_model(&arch, 0)?,
        ModelKind::BnBaseline => models::build_baseline_model(&arch, 0)?,
    };
    fill_group(&mut model.psi, &mut arrays)?;
    fill_group(&mut model.theta, &mut arrays)?;
    fill_group(&mut model.buffers, &mut arrays)?;
    if let Some(extra) = arrays.first() {
        return Err(PersistError::UnexpectedArray(extra.name.clone()));
    }
    Ok((model, train))
}

/// Write a predicted parameter vector as a single-array checkpoint file.
pub fn save_phi(
    path: &Path,
    phi: &GbnParams,
    arch: &ArchConfig,
    k: usize,
    seed: u64,
) -> Result<(), PersistError> {
    let mut w = Writer::new(&CheckpointConfig::Phi {
        arch: arch.clone(),
        k,
        seed,
    });
    w.array_f64("phi", &[phi.phi.len()], &phi.phi);
    fs::write(path, w.buf)?;
    Ok(())
}

/// Load a phi vector file back into `GbnParams` plus its provenance.
pub fn load_phi(path: &Path) -> Result<(GbnParams, ArchConfig, usize, u64), PersistError> {
    let bytes = fs::read(path)?;
    let (config, mut r) = parse_header(&bytes, path)?;
    let CheckpointConfig::Phi { arch, k, seed } = config else {
        return Err(PersistError::WrongContents {
            expected: "phi vector file",
            got: "model checkpoint",
        });
    };
    let arrays = read_arrays(&mut r)?;
    let [raw] = arrays.as_slice() else {
        return Err(PersistError::Corrupt(format!(
            "{}: phi file must hold exactly one array",
            path.display()
        )));
    };
    if raw.name != "phi" {
        return Err(PersistError::UnexpectedArray(raw.name.clone()));
    }
    let phi = GbnParams::new(raw.data.clone(), arch.phi_layout())?;
    Ok((phi, arch, k, seed))
}
