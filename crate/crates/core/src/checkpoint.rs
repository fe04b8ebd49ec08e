//! The `HSTC` checkpoint file.
//!
//! ```text
//! "HSTC" | u32 version | u64 config_hash | u64 step | u32 entry_count
//! entries, sorted by name:
//!     u32 name_len | name bytes | u8 dtype (0 = f32, 1 = f64) | u32 rank
//!     | rank × u64 extents | little-endian row-major data
//! u32 CRC-32 of the entry bytes
//! ```
//!
//! Optimizer moments travel as ordinary entries under `optim.m.` and
//! `optim.v.`, and the optimizer step under `optim.step`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{HstError, Result};
use crate::param::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"HSTC";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 4;

/// A tensor of either element type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Converts to `T`; exact when the stored type is `T`.
    pub fn to<T: Element>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    /// Bitwise equality of dtype, shape and data.
    pub fn bit_eq(&self, other: &AnyTensor) -> bool {
        match (self, other) {
            (AnyTensor::F32(a), AnyTensor::F32(b)) => a.bit_eq(b),
            (AnyTensor::F64(a), AnyTensor::F64(b)) => a.bit_eq(b),
            _ => false,
        }
    }

    fn write_data(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub entries: BTreeMap<String, AnyTensor>,
}

impl Checkpoint {
    pub fn new(config_hash: u64, step: u64) -> Self {
        Self {
            config_hash,
            step,
            entries: BTreeMap::new(),
        }
    }

    /// Snapshot of every parameter value in `store`.
    pub fn from_params<T: Element>(config_hash: u64, step: u64, store: &ParamStore<T>) -> Self {
        let mut ck = Self::new(config_hash, step);
        for (_, p) in store.iter() {
            ck.entries
                .insert(p.name().to_string(), AnyTensor::from_tensor(p.value()));
        }
        ck
    }

    pub fn insert<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.insert(name.into(), AnyTensor::from_tensor(t));
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.get(name)
    }

    /// Parameter entries, excluding optimizer state.
    pub fn params(&self) -> impl Iterator<Item = (&String, &AnyTensor)> {
        self.entries.iter().filter(|(k, _)| !k.starts_with("optim."))
    }

    /// Copies every parameter of `store` from this checkpoint. Names and
    /// shapes must match exactly, with no extra parameter entries.
    pub fn load_into<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut seen = 0;
        for id in store.sorted_ids().collect::<Vec<_>>() {
            let name = store.get(id).name().to_string();
            let entry = self
                .entries
                .get(&name)
                .ok_or_else(|| HstError::Wiring(format!("checkpoint has no entry `{name}`")))?;
            if entry.shape() != store.value(id).shape() {
                return Err(HstError::dimension(format!(
                    "checkpoint entry `{name}` has shape {:?}, model expects {:?}",
                    entry.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = entry.to();
            seen += 1;
        }
        let extra = self.params().count() - seen;
        if extra > 0 {
            let unknown: Vec<&String> = self
                .params()
                .map(|(k, _)| k)
                .filter(|k| store.id(k).is_none())
                .collect();
            return Err(HstError::Wiring(format!(
                "checkpoint has entries the model lacks: {unknown:?}"
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let start = out.len();
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().tag());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            t.write_data(&mut out);
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + 4 {
            return Err(HstError::format(bytes.len() as u64, "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(HstError::format(0, "bad magic, expected \"HSTC\""));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(HstError::format(4, format!("unsupported version {version}")));
        }
        let crc_at = bytes.len() - 4;
        let stored = u32_at(crc_at);
        let computed = crc32fast::hash(&bytes[HEADER_LEN..crc_at]);
        if stored != computed {
            return Err(HstError::Corrupt {
                offset: crc_at as u64,
                stored,
                computed,
            });
        }
        let mut ck = Self::new(u64_at(8), u64_at(16));
        let count = u32_at(24) as usize;
        let mut pos = HEADER_LEN;
        let need = |pos: usize, n: usize| -> Result<()> {
            if crc_at.saturating_sub(pos) < n {
                Err(HstError::format(
                    pos as u64,
                    format!("entry runs past the payload ({n} bytes needed)"),
                ))
            } else {
                Ok(())
            }
        };
        let mut previous: Option<String> = None;
        for _ in 0..count {
            let entry_at = pos as u64;
            need(pos, 4)?;
            let name_len = u32_at(pos) as usize;
            pos += 4;
            need(pos, name_len)?;
            let name = std::str::from_utf8(&bytes[pos..pos + name_len])
                .map_err(|_| HstError::format(pos as u64, "entry name is not UTF-8"))?
                .to_string();
            pos += name_len;
            if previous.as_deref().is_some_and(|p| p >= name.as_str()) {
                return Err(HstError::format(
                    entry_at,
                    format!("entry `{name}` is out of lexicographic order"),
                ));
            }
            need(pos, 5)?;
            let dtype = DType::from_tag(bytes[pos])
                .ok_or_else(|| HstError::format(pos as u64, format!("unknown dtype tag {}", bytes[pos])))?;
            let rank = u32_at(pos + 1) as usize;
            pos += 5;
            need(pos, rank.saturating_mul(8))?;
            let shape: Vec<usize> = (0..rank).map(|i| u64_at(pos + 8 * i) as usize).collect();
            pos += 8 * rank;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| HstError::format(entry_at, "extent product overflows"))?;
            let len = numel
                .checked_mul(dtype.size_of())
                .ok_or_else(|| HstError::format(entry_at, "entry size overflows"))?;
            need(pos, len)?;
            let raw = &bytes[pos..pos + len];
            let tensor = match dtype {
                DType::F32 => AnyTensor::F32(Tensor::new(shape, raw.chunks_exact(4).map(f32::read_le).collect())?),
                DType::F64 => AnyTensor::F64(Tensor::new(shape, raw.chunks_exact(8).map(f64::read_le).collect())?),
            };
            pos += len;
            ck.entries.insert(name.clone(), tensor);
            previous = Some(name);
        }
        if pos != crc_at {
            return Err(HstError::format(pos as u64, "trailing bytes after the last entry"));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
