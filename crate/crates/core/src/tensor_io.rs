//! Tensor container reader/writer.
//!
//! Layout (safetensors-compatible):
//!
//! ```text
//! [u64 LE: header length N][N bytes: UTF-8 JSON header][payload bytes]
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets": [begin, end]}`
//! with offsets relative to the start of the payload. An optional `__metadata__`
//! entry holds string-to-string pairs. Elements are little-endian, row-major.
//! `F16` and `BF16` payloads are widened to `f32` on access.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    fn parse(name: &str, s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            other => Err(Error::UnknownDtype {
                name: name.to_string(),
                dtype: other.to_string(),
            }),
        }
    }
}

/// Location and type of one tensor inside the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
    pub byte_length: usize,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A dense `f32` tensor materialised from a store entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// An immutable-after-load collection of named tensors over one payload buffer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    entries: BTreeMap<String, TensorInfo>,
    payload: Vec<u8>,
    metadata: BTreeMap<String, String>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an `f32` tensor. Replacing an existing name is rejected so
    /// payload ranges never alias.
    pub fn insert_f32(&mut self, name: impl Into<String>, shape: &[usize], data: &[f32]) -> Result<()> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ByteLengthMismatch {
                name,
                shape: shape.to_vec(),
                expected: numel * 4,
                found: data.len() * 4,
            });
        }
        if self.entries.contains_key(&name) || name == METADATA_KEY {
            return Err(Error::Invalid(format!("duplicate tensor name `{name}`")));
        }
        let byte_offset = self.payload.len();
        self.payload.reserve(data.len() * 4);
        for v in data {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.insert(
            name,
            TensorInfo {
                dtype: Dtype::F32,
                shape: shape.to_vec(),
                byte_offset,
                byte_length: data.len() * 4,
            },
        );
        Ok(())
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Decodes a tensor to `f32`, widening half-precision types.
    pub fn get(&self, name: &str) -> Result<Tensor> {
        let info = self
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let bytes = &self.payload[info.byte_offset..info.byte_offset + info.byte_length];
        let data = match info.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        };
        Ok(Tensor {
            shape: info.shape.clone(),
            data,
        })
    }

    /// Like [`get`](Self::get) but also checks the shape.
    pub fn get_shaped(&self, name: &str, expected: &[usize]) -> Result<Tensor> {
        let info = self
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if info.shape != expected {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: info.shape.clone(),
            });
        }
        self.get(name)
    }

    /// Parses a container from bytes, validating every entry.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::MalformedHeader(format!(
                "file is {} bytes, shorter than the 8-byte length prefix",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let header_len = usize::try_from(header_len)
            .ok()
            .filter(|n| 8usize.checked_add(*n).is_some_and(|end| end <= bytes.len()))
            .ok_or_else(|| {
                Error::MalformedHeader(format!(
                    "header length {header_len} exceeds file size {}",
                    bytes.len()
                ))
            })?;
        let header_text = std::str::from_utf8(&bytes[8..8 + header_len])
            .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let header: Map<String, Value> = serde_json::from_str(header_text)
            .map_err(|e| Error::MalformedHeader(format!("header is not a JSON object: {e}")))?;
        let payload = bytes[8 + header_len..].to_vec();

        let mut entries = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                let obj = value.as_object().ok_or_else(|| {
                    Error::MalformedHeader("`__metadata__` is not an object".to_string())
                })?;
                for (k, v) in obj {
                    let v = v.as_str().ok_or_else(|| {
                        Error::MalformedHeader(format!("metadata `{k}` is not a string"))
                    })?;
                    metadata.insert(k.clone(), v.to_string());
                }
                continue;
            }
            let info = parse_entry(&name, &value, payload.len())?;
            entries.insert(name, info);
        }
        check_overlaps(&entries)?;
        Ok(Self {
            entries,
            payload,
            metadata,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        if !self.metadata.is_empty() {
            let meta: Map<String, Value> = self
                .metadata
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            header.insert(METADATA_KEY.to_string(), Value::Object(meta));
        }
        for (name, info) in &self.entries {
            header.insert(
                name.clone(),
                serde_json::json!({
                    "dtype": info.dtype.as_str(),
                    "shape": info.shape,
                    "data_offsets": [info.byte_offset, info.byte_offset + info.byte_length],
                }),
            );
        }
        let mut text = serde_json::to_string(&Value::Object(header)).expect("header serializes");
        // Pad so the payload starts 8-byte aligned, as stock writers do.
        while !(8 + text.len()).is_multiple_of(8) {
            text.push(' ');
        }
        let mut out = Vec::with_capacity(8 + text.len() + self.payload.len());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

fn parse_entry(name: &str, value: &Value, payload_len: usize) -> Result<TensorInfo> {
    let malformed = |what: &str| Error::MalformedHeader(format!("tensor `{name}`: {what}"));
    let obj = value.as_object().ok_or_else(|| malformed("entry is not an object"))?;
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing dtype"))?;
    let dtype = Dtype::parse(name, dtype)?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing shape"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| malformed("shape must hold non-negative integers"))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .ok_or_else(|| malformed("data_offsets must be [begin, end]"))?;
    let begin = offsets[0].as_u64().ok_or_else(|| malformed("bad begin offset"))? as usize;
    let end = offsets[1].as_u64().ok_or_else(|| malformed("bad end offset"))? as usize;
    if end < begin {
        return Err(malformed("end offset precedes begin offset"));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| malformed("shape overflows"))?;
    let expected = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| malformed("shape overflows"))?;
    if expected != end - begin {
        return Err(Error::ByteLengthMismatch {
            name: name.to_string(),
            shape,
            expected,
            found: end - begin,
        });
    }
    if end > payload_len {
        return Err(Error::TruncatedPayload {
            name: name.to_string(),
            end,
            payload_len,
        });
    }
    Ok(TensorInfo {
        dtype,
        shape,
        byte_offset: begin,
        byte_length: end - begin,
    })
}

fn check_overlaps(entries: &BTreeMap<String, TensorInfo>) -> Result<()> {
    let mut ranges: Vec<(&str, usize, usize)> = entries
        .iter()
        .filter(|(_, i)| i.byte_length > 0)
        .map(|(n, i)| (n.as_str(), i.byte_offset, i.byte_offset + i.byte_length))
        .collect();
    ranges.sort_by_key(|&(n, b, _)| (b, n));
    for pair in ranges.windows(2) {
        let (prev, _, prev_end) = pair[0];
        let (name, begin, _) = pair[1];
        if begin < prev_end {
            return Err(Error::OverlappingRanges {
                name: name.to_string(),
                other: prev.to_string(),
            });
        }
    }
    Ok(())
}

pub fn load_store(path: impl AsRef<Path>) -> Result<TensorStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorStore::from_bytes(&bytes)
}

pub fn save_store(store: &TensorStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, store.to_bytes()).map_err(|e| Error::io(path, e))
}
