//! Single-file checkpoint archives of named dense tensors.
//!
//! File layout:
//!
//! ```text
//! "MRG1" | header length H (u64 LE) | H bytes of UTF-8 JSON | payload
//! ```
//!
//! The JSON header is `{"metadata": {..}, "tensors": [{"name", "dtype",
//! "shape", "offset"}, ..]}`. Tensors are listed in lexicographic name order
//! and their byte ranges are contiguous from offset 0 of the payload, which is
//! little-endian and row-major. `f16` and `bf16` payloads are accepted on read
//! and upcast to `f32`; writes are always `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MRG1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F16,
    Bf16,
}

impl Dtype {
    pub fn size_of(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::Bf16 => 2,
        }
    }
}

/// A dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::ElementCount(name));
        }
        Ok(Self { name, shape, data })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }
}

/// A named set of tensors plus free-form string metadata.
///
/// Both maps are `BTreeMap`s, so iteration is lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor, rejecting a name that is already present.
    pub fn insert(&mut self, tensor: Tensor) -> Result<()> {
        if self.tensors.contains_key(tensor.name()) {
            return Err(Error::DuplicateTensor(tensor.name.clone()));
        }
        self.tensors.insert(tensor.name.clone(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Bitwise equality of all tensors and metadata.
    pub fn bit_eq(&self, other: &TensorArchive) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .values()
                .zip(other.tensors.values())
                .all(|(a, b)| a.bit_eq(b))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries: Vec<HeaderEntry> = self
            .tensors
            .values()
            .map(|t| {
                let entry = HeaderEntry {
                    name: t.name.clone(),
                    dtype: Dtype::F32,
                    shape: t.shape.iter().map(|&d| d as u64).collect(),
                    offset,
                };
                offset += (t.numel() * Dtype::F32.size_of()) as u64;
                entry
            })
            .collect();
        let header = Header {
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serialization is infallible");

        let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::MalformedHeader("missing MRG1 magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let header_end = 12u64
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| Error::MalformedHeader("header length exceeds file size".into()))?
            as usize;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut archive = TensorArchive {
            tensors: BTreeMap::new(),
            metadata: header.metadata,
        };
        let mut expected_offset = 0u64;
        for entry in header.tensors {
            if entry.offset != expected_offset {
                return Err(Error::MalformedHeader(format!(
                    "tensor {} at offset {}, expected {}",
                    entry.name, entry.offset, expected_offset
                )));
            }
            if entry.shape.contains(&0) {
                return Err(Error::MalformedHeader(format!(
                    "tensor {} has a zero dimension",
                    entry.name
                )));
            }
            let numel = entry
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::MalformedHeader(format!("tensor {} too large", entry.name)))?;
            let nbytes = numel
                .checked_mul(entry.dtype.size_of() as u64)
                .ok_or_else(|| Error::MalformedHeader(format!("tensor {} too large", entry.name)))?;
            let available = (payload.len() as u64).saturating_sub(entry.offset);
            if nbytes > available {
                return Err(Error::TruncatedPayload {
                    tensor: entry.name,
                    needed: nbytes,
                    available,
                });
            }
            let raw = &payload[entry.offset as usize..(entry.offset + nbytes) as usize];
            let data = decode(raw, entry.dtype);
            let tensor = Tensor {
                name: entry.name,
                shape: entry.shape.iter().map(|&d| d as usize).collect(),
                data,
            };
            if let Some(index) = tensor.first_non_finite() {
                return Err(Error::NonFinite {
                    tensor: tensor.name,
                    index,
                });
            }
            archive.insert(tensor)?;
            expected_offset += nbytes;
        }
        if expected_offset != payload.len() as u64 {
            return Err(Error::MalformedHeader(format!(
                "{} trailing payload bytes",
                payload.len() as u64 - expected_offset
            )));
        }
        Ok(archive)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: BTreeMap<String, String>,
    tensors: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<u64>,
    offset: u64,
}

fn decode(raw: &[u8], dtype: Dtype) -> Vec<f32> {
    match dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F16 => raw
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::Bf16 => raw
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    }
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<TensorArchive> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorArchive::from_bytes(&bytes)
}

pub fn save_archive(archive: &TensorArchive, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, archive.to_bytes()).map_err(|e| Error::io(path, e))
}
