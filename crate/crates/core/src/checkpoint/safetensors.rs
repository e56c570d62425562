//! Reader and canonical writer for the safetensors container layout:
//! an 8-byte little-endian header length, a UTF-8 JSON header mapping each
//! tensor name to `{dtype, shape, data_offsets}`, then the raw little-endian
//! data section.
//!
//! The writer is canonical: tensors are laid out in name order with no gaps
//! and the header is space-padded to a multiple of 8 bytes, so
//! `write(read(x))` reproduces `x` for files it produced.

use std::collections::BTreeMap;

use half::{bf16, f16};
use serde_json::{json, Map, Value};

use crate::error::CheckpointError;
use crate::tensor::Tensor;

const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum StorageDtype {
    F32,
    F16,
    BF16,
    F64,
}

impl StorageDtype {
    pub fn size(self) -> usize {
        match self {
            StorageDtype::F16 | StorageDtype::BF16 => 2,
            StorageDtype::F32 => 4,
            StorageDtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StorageDtype::F32 => "F32",
            StorageDtype::F16 => "F16",
            StorageDtype::BF16 => "BF16",
            StorageDtype::F64 => "F64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "F32" => StorageDtype::F32,
            "F16" => StorageDtype::F16,
            "BF16" => StorageDtype::BF16,
            "F64" => StorageDtype::F64,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub dtype: StorageDtype,
    pub shape: Vec<usize>,
    pub start: usize,
    pub end: usize,
}

/// A parsed container. Holds the whole file.
#[derive(Debug, Clone)]
pub struct Container {
    bytes: Vec<u8>,
    data_start: usize,
    metadata: BTreeMap<String, String>,
    entries: BTreeMap<String, Entry>,
}

fn header_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Header(msg.into())
}

impl Container {
    pub fn parse(bytes: Vec<u8>) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Truncated(format!(
                "{} bytes, need at least 8 for the header length",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER {
            return Err(header_err(format!("header length {header_len} is implausibly large")));
        }
        let data_start = 8 + header_len as usize;
        if data_start > bytes.len() {
            return Err(CheckpointError::Truncated(format!(
                "header declares {header_len} bytes but only {} follow",
                bytes.len() - 8
            )));
        }
        let header: Map<String, Value> =
            serde_json::from_slice(&bytes[8..data_start]).map_err(|e| header_err(format!("invalid JSON: {e}")))?;
        let data_len = bytes.len() - data_start;

        let mut metadata = BTreeMap::new();
        let mut entries = BTreeMap::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                let obj = value
                    .as_object()
                    .ok_or_else(|| header_err("__metadata__ must be an object"))?;
                for (k, v) in obj {
                    let v = v
                        .as_str()
                        .ok_or_else(|| header_err(format!("metadata value `{k}` must be a string")))?;
                    metadata.insert(k.clone(), v.to_string());
                }
                continue;
            }
            let entry = parse_entry(&name, &value)?;
            if entry.end > data_len {
                return Err(CheckpointError::OutOfBounds { tensor: name });
            }
            let declared: usize = entry.shape.iter().product::<usize>() * entry.dtype.size();
            if declared != entry.end - entry.start {
                return Err(CheckpointError::ShapeMismatch {
                    tensor: name,
                    expected: entry.shape.clone(),
                    found: vec![(entry.end - entry.start) / entry.dtype.size()],
                });
            }
            entries.insert(name, entry);
        }

        let mut spans: Vec<(&String, &Entry)> = entries.iter().filter(|(_, e)| e.end > e.start).collect();
        spans.sort_by_key(|(n, e)| (e.start, e.end, (*n).clone()));
        for pair in spans.windows(2) {
            let ((a_name, a), (b_name, b)) = (pair[0], pair[1]);
            if b.start < a.end {
                return Err(CheckpointError::Overlap {
                    tensor: b_name.clone(),
                    other: a_name.clone(),
                });
            }
        }

        Ok(Self {
            bytes,
            data_start,
            metadata,
            entries,
        })
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn entries(&self) -> &BTreeMap<String, Entry> {
        &self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// The data section following the header.
    pub fn payload(&self) -> &[u8] {
        &self.bytes[self.data_start..]
    }

    pub fn raw(&self, name: &str) -> Result<(&Entry, &[u8]), CheckpointError> {
        let e = self.entries.get(name).ok_or_else(|| CheckpointError::MissingTensor {
            tensor: name.to_string(),
        })?;
        let data = &self.bytes[self.data_start + e.start..self.data_start + e.end];
        Ok((e, data))
    }

    /// Decodes a tensor to `f32`; half-precision formats upcast exactly.
    pub fn tensor_f32(&self, name: &str) -> Result<Tensor<f32>, CheckpointError> {
        let (e, data) = self.raw(name)?;
        let values = decode_f32(e.dtype, data);
        Tensor::new(e.shape.clone(), values).map_err(|_| CheckpointError::ShapeMismatch {
            tensor: name.to_string(),
            expected: e.shape.clone(),
            found: vec![],
        })
    }
}

fn parse_entry(name: &str, value: &Value) -> Result<Entry, CheckpointError> {
    let obj = value
        .as_object()
        .ok_or_else(|| header_err(format!("entry `{name}` must be an object")))?;
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| header_err(format!("entry `{name}` lacks a dtype")))?;
    let dtype = StorageDtype::parse(dtype_str).ok_or_else(|| CheckpointError::UnknownDtype {
        tensor: name.to_string(),
        dtype: dtype_str.to_string(),
    })?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| header_err(format!("entry `{name}` lacks a shape")))?
        .iter()
        .map(|v| v.as_u64().map(|x| x as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| header_err(format!("entry `{name}` has a non-integer shape")))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
        .ok_or_else(|| header_err(format!("entry `{name}` needs data_offsets [begin, end]")))?;
    if offsets.1 < offsets.0 {
        return Err(CheckpointError::OutOfBounds {
            tensor: name.to_string(),
        });
    }
    Ok(Entry {
        dtype,
        shape,
        start: offsets.0,
        end: offsets.1,
    })
}

pub fn decode_f32(dtype: StorageDtype, data: &[u8]) -> Vec<f32> {
    match dtype {
        StorageDtype::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        StorageDtype::F16 => data
            .chunks_exact(2)
            .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
            .collect(),
        StorageDtype::BF16 => data
            .chunks_exact(2)
            .map(|c| bf16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
            .collect(),
        StorageDtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
            .collect(),
    }
}

pub fn encode_f32(dtype: StorageDtype, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.size());
    for &v in values {
        match dtype {
            StorageDtype::F32 => out.extend_from_slice(&v.to_le_bytes()),
            StorageDtype::F16 => out.extend_from_slice(&f16::from_f32(v).to_bits().to_le_bytes()),
            StorageDtype::BF16 => out.extend_from_slice(&bf16::from_f32(v).to_bits().to_le_bytes()),
            StorageDtype::F64 => out.extend_from_slice(&(v as f64).to_le_bytes()),
        }
    }
    out
}

/// One tensor to be written.
pub struct RawTensor {
    pub dtype: StorageDtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// Serializes tensors canonically (name order, contiguous, 8-byte padded header).
pub fn serialize(tensors: &BTreeMap<String, RawTensor>, metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut header = Map::new();
    if !metadata.is_empty() {
        header.insert(METADATA_KEY.to_string(), json!(metadata));
    }
    let mut offset = 0usize;
    for (name, t) in tensors {
        let end = offset + t.bytes.len();
        header.insert(
            name.clone(),
            json!({ "dtype": t.dtype.as_str(), "shape": t.shape, "data_offsets": [offset, end] }),
        );
        offset = end;
    }
    let mut header_bytes = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    while !header_bytes.len().is_multiple_of(8) {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in tensors.values() {
        out.extend_from_slice(&t.bytes);
    }
    out
}
