//! Binary checkpoint files: named parameter groups with optional optimizer
//! state, integrity-checked by a trailing CRC32.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "TILENET\0"
//! version  u32      currently 1
//! step     u64      training step the snapshot was taken at
//! groups   u32      group count, then per group:
//!   name        u16 length + utf8 bytes
//!   has_adam    u8 (0 or 1)
//!   [adam_step  u64, lr/beta1/beta2/epsilon f64 x4]   if has_adam
//!   params      tensor list
//!   [m, v       tensor lists]                          if has_adam
//! crc32    u32      over every preceding byte
//! ```
//!
//! A tensor list is a u32 count of records: name (u16 length + utf8), rank
//! u8, dims u32 per axis, then row-major f64 values.

use crate::adam::{AdamConfig, AdamState};
use crate::params::{ParamError, ParamSet};
use crate::tensor::Tensor;
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"TILENET\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}, expected {CHECKPOINT_VERSION}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("file too short: {0} bytes")]
    TooShort(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no group named {0:?}")]
    MissingGroup(String),
    #[error("group {group:?} is missing tensor {name:?}")]
    MissingTensor { group: String, name: String },
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// One named parameter set, optionally with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: ParamSet,
    pub adam: Option<AdamState>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub step: u64,
    pub groups: Vec<ParamGroup>,
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Copy the named group's tensors into `target`, which must already hold
    /// the same names and shapes; the error names the first offender.
    pub fn restore_into(&self, name: &str, target: &mut ParamSet) -> Result<(), CheckpointError> {
        let group = self
            .group(name)
            .ok_or_else(|| CheckpointError::MissingGroup(name.to_string()))?;
        restore_params(&group.name, &group.params, target)
    }

    /// Restore tensors and optimizer state for one group.
    pub fn restore_with_adam(
        &self,
        name: &str,
        target: &mut ParamSet,
        adam: &mut AdamState,
    ) -> Result<(), CheckpointError> {
        let group = self
            .group(name)
            .ok_or_else(|| CheckpointError::MissingGroup(name.to_string()))?;
        let saved = group.adam.as_ref().ok_or_else(|| {
            CheckpointError::Malformed(format!("group {name:?} carries no optimizer state"))
        })?;
        restore_params(&group.name, &group.params, target)?;
        restore_params(&group.name, &saved.m, &mut adam.m)?;
        restore_params(&group.name, &saved.v, &mut adam.v)?;
        adam.config = saved.config;
        adam.step = saved.step;
        Ok(())
    }
}

fn restore_params(
    group: &str,
    source: &ParamSet,
    target: &mut ParamSet,
) -> Result<(), CheckpointError> {
    for name in target.names().map(str::to_owned).collect::<Vec<_>>() {
        if source.get(&name).is_none() {
            return Err(CheckpointError::MissingTensor {
                group: group.to_string(),
                name,
            });
        }
    }
    for (name, tensor) in source.iter() {
        target.set(name, tensor.clone())?;
    }
    Ok(())
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn name(&mut self, s: &str) -> Result<(), CheckpointError> {
        if s.len() > MAX_NAME_LEN {
            return Err(CheckpointError::Malformed(format!(
                "name longer than {MAX_NAME_LEN} bytes"
            )));
        }
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn tensors(&mut self, set: &ParamSet) -> Result<(), CheckpointError> {
        self.u32(set.len() as u32);
        for (name, tensor) in set.iter() {
            self.name(name)?;
            if tensor.shape().len() > MAX_RANK {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {name:?} has rank {}",
                    tensor.shape().len()
                )));
            }
            self.u8(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                self.u32(u32::try_from(d).map_err(|_| {
                    CheckpointError::Malformed(format!("tensor {name:?} axis {d} exceeds u32"))
                })?);
            }
            for &v in tensor.values() {
                self.f64(v);
            }
        }
        Ok(())
    }
}

/// Serialize to bytes, CRC included.
pub fn to_bytes(checkpoint: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(checkpoint.step);
    w.u32(checkpoint.groups.len() as u32);
    for group in &checkpoint.groups {
        w.name(&group.name)?;
        w.u8(group.adam.is_some() as u8);
        if let Some(adam) = &group.adam {
            w.u64(adam.step);
            w.f64(adam.config.learning_rate);
            w.f64(adam.config.beta1);
            w.f64(adam.config.beta2);
            w.f64(adam.config.epsilon);
        }
        w.tensors(&group.params)?;
        if let Some(adam) = &group.adam {
            w.tensors(&adam.m)?;
            w.tensors(&adam.v)?;
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

/// Write atomically: serialize, write a sibling temp file, rename over.
pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    let bytes = to_bytes(checkpoint)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(CheckpointError::Malformed(format!(
                "need {n} bytes at offset {}, have {remaining}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let len = self.u16()? as usize;
        if len > MAX_NAME_LEN {
            return Err(CheckpointError::Malformed(format!(
                "name length {len} exceeds {MAX_NAME_LEN}"
            )));
        }
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::Malformed("name is not utf8".into()))
    }

    fn tensors(&mut self) -> Result<ParamSet, CheckpointError> {
        let count = self.u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name = self.name()?;
            let rank = self.u8()? as usize;
            if rank > MAX_RANK {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {name:?} has rank {rank}"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = self.u32()? as usize;
                numel = numel.checked_mul(d).ok_or_else(|| {
                    CheckpointError::Malformed(format!("tensor {name:?} shape overflows"))
                })?;
                shape.push(d);
            }
            // Bound before allocating: the payload must actually be present.
            let remaining = self.buf.len() - self.pos;
            if numel > remaining / 8 {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {name:?} claims {numel} values, only {} bytes left",
                    remaining
                )));
            }
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(self.f64()?);
            }
            let tensor = Tensor::new(shape, values)
                .map_err(|e| CheckpointError::Malformed(format!("tensor {name:?}: {e}")))?;
            set.insert(&name, tensor)
                .map_err(|_| CheckpointError::Malformed(format!("duplicate tensor {name:?}")))?;
        }
        Ok(set)
    }
}

/// Parse bytes produced by [`to_bytes`]. Verifies the CRC before touching
/// any structure, so truncation and corruption surface as checksum errors.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let min = CHECKPOINT_MAGIC.len() + 4 + 8 + 4 + 4;
    if bytes.len() < min {
        return Err(CheckpointError::TooShort(bytes.len()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let step = r.u64()?;
    let group_count = r.u32()? as usize;
    let mut groups = Vec::new();
    for _ in 0..group_count {
        let name = r.name()?;
        let has_adam = match r.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(CheckpointError::Malformed(format!(
                    "group {name:?} has_adam flag {other}"
                )))
            }
        };
        let header = if has_adam {
            let adam_step = r.u64()?;
            let config = AdamConfig {
                learning_rate: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                epsilon: r.f64()?,
            };
            Some((adam_step, config))
        } else {
            None
        };
        let params = r.tensors()?;
        let adam = match header {
            Some((adam_step, config)) => {
                let m = r.tensors()?;
                let v = r.tensors()?;
                Some(AdamState {
                    config,
                    step: adam_step,
                    m,
                    v,
                })
            }
            None => None,
        };
        groups.push(ParamGroup { name, params, adam });
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint { step, groups })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}
