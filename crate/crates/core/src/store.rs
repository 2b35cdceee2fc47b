//! Header-prefixed binary tensor container.
//!
//! ```text
//! [u64 LE header length N][N bytes UTF-8 JSON header][raw LE tensor data]
//! ```
//!
//! The header maps tensor names to `{"dtype", "shape", "data_offsets"}` with
//! offsets relative to the start of the data section, plus an optional
//! `"__metadata__"` object of string values. This is the layout used by
//! `.safetensors` adapter checkpoints.
//!
//! Saving is deterministic: header keys are sorted and tensor data is packed
//! back to back in lexicographic name order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use half::{bf16, f16};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::matrix::{Matrix, Real};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor data range for {name:?} is invalid: {reason}")]
    OffsetOverlap { name: String, reason: String },
    #[error("unknown dtype {dtype:?} for tensor {name:?}")]
    UnknownDtype { name: String, dtype: String },
    #[error("tensor {name:?} has rank {rank}; only rank <= 2 converts to a matrix")]
    ShapeUnsupported { name: String, rank: usize },
    #[error("tensor {name:?}: {reason}")]
    InvalidEntry { name: String, reason: String },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F64,
    F32,
    F16,
    BF16,
}

impl DType {
    pub const fn byte_width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            DType::F64 => "F64",
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "F64" => Some(DType::F64),
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named tensor with its raw little-endian bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let name = name.into();
        let expected = element_count(&shape)
            .and_then(|n| n.checked_mul(dtype.byte_width()))
            .ok_or_else(|| StoreError::InvalidEntry {
                name: name.clone(),
                reason: format!("shape {shape:?} overflows"),
            })?;
        if expected != data.len() {
            return Err(StoreError::InvalidEntry {
                name,
                reason: format!(
                    "shape {shape:?} of {dtype} needs {expected} bytes, buffer has {}",
                    data.len()
                ),
            });
        }
        Ok(Self { name, dtype, shape, data })
    }

    /// Encodes a matrix as a rank-2 tensor, rounding to nearest-even when
    /// narrowing.
    pub fn from_matrix<T: Real>(name: impl Into<String>, m: &Matrix<T>, dtype: DType) -> Self {
        let values = m.as_slice().iter().map(|&x| x.as_f64());
        let data = encode(values, dtype, m.as_slice().len());
        Self { name: name.into(), dtype, shape: vec![m.rows(), m.cols()], data }
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, values: &[f64], dtype: DType) -> Result<Self> {
        let data = encode(values.iter().copied(), dtype, values.len());
        Self::new(name, dtype, shape, data)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dtype.byte_width()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Decodes every element to `f64`. All supported dtypes upcast exactly.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        let w = self.dtype.byte_width();
        let chunks = self.data.chunks_exact(w);
        match self.dtype {
            DType::F64 => chunks
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => chunks
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F16 => chunks
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            DType::BF16 => chunks
                .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
        }
    }

    /// `(rows, cols)` view of a rank <= 2 tensor; rank 1 is a single row and
    /// rank 0 a 1x1 matrix.
    pub fn matrix_shape(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [] => Ok((1, 1)),
            [k] => Ok((1, *k)),
            [d, k] => Ok((*d, *k)),
            s => Err(StoreError::ShapeUnsupported { name: self.name.clone(), rank: s.len() }),
        }
    }

    /// Converts to a dense matrix in the compute precision `T`.
    pub fn to_compute<T: Real>(&self) -> Result<Matrix<T>> {
        let (rows, cols) = self.matrix_shape()?;
        let values = self.to_f64_vec().into_iter().map(T::from_f64).collect();
        Ok(Matrix::from_vec(rows, cols, values))
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

fn encode(values: impl Iterator<Item = f64>, dtype: DType, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len * dtype.byte_width());
    match dtype {
        DType::F64 => values.for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        DType::F32 => values.for_each(|x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        DType::F16 => values.for_each(|x| out.extend_from_slice(&f16::from_f64(x).to_le_bytes())),
        DType::BF16 => values.for_each(|x| out.extend_from_slice(&bf16::from_f64(x).to_le_bytes())),
    }
    out
}

/// Named tensors plus string metadata. Iteration order is lexicographic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TensorStore {
    entries: BTreeMap<String, TensorEntry>,
    metadata: BTreeMap<String, String>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an entry, replacing any previous entry of the same name.
    pub fn insert(&mut self, entry: TensorEntry) -> Option<TensorEntry> {
        self.entries.insert(entry.name.clone(), entry)
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.get(name)
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &TensorEntry> {
        self.entries.values()
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

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let Some(len_bytes) = bytes.get(..8) else {
            return Err(StoreError::MalformedHeader(format!(
                "file is {} bytes, shorter than the 8-byte length prefix",
                bytes.len()
            )));
        };
        let header_len = u64::from_le_bytes(len_bytes.try_into().unwrap());
        let available = (bytes.len() - 8) as u64;
        if header_len > available {
            return Err(StoreError::MalformedHeader(format!(
                "header length {header_len} exceeds the {available} bytes after the prefix"
            )));
        }
        let header_end = 8 + header_len as usize;
        let header = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| StoreError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let header: Value = serde_json::from_str(header)
            .map_err(|e| StoreError::MalformedHeader(format!("header is not valid JSON: {e}")))?;
        let Value::Object(header) = header else {
            return Err(StoreError::MalformedHeader("header is not a JSON object".into()));
        };
        let data = &bytes[header_end..];

        let mut store = TensorStore::new();
        let mut ranges: Vec<(usize, usize, String)> = Vec::with_capacity(header.len());
        for (name, info) in header {
            if name == METADATA_KEY {
                store.metadata = parse_metadata(info)?;
                continue;
            }
            let (dtype, shape, begin, end) = parse_tensor_info(&name, &info)?;
            if begin > end || end > data.len() {
                return Err(StoreError::OffsetOverlap {
                    name,
                    reason: format!("[{begin}, {end}) outside data section of {} bytes", data.len()),
                });
            }
            let entry = TensorEntry::new(name.clone(), dtype, shape, data[begin..end].to_vec())
                .map_err(|e| StoreError::MalformedHeader(e.to_string()))?;
            ranges.push((begin, end, name));
            store.entries.insert(entry.name.clone(), entry);
        }

        ranges.sort();
        for pair in ranges.windows(2) {
            let (_, prev_end, prev) = &pair[0];
            let (begin, _, name) = &pair[1];
            if begin < prev_end {
                return Err(StoreError::OffsetOverlap {
                    name: name.clone(),
                    reason: format!("overlaps {prev:?}"),
                });
            }
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        if !self.metadata.is_empty() {
            let meta = self
                .metadata
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            header.insert(METADATA_KEY.to_string(), Value::Object(meta));
        }
        let mut offset = 0usize;
        for entry in self.entries.values() {
            let end = offset + entry.data.len();
            let mut info = Map::new();
            info.insert("dtype".into(), Value::from(entry.dtype.as_str()));
            info.insert("shape".into(), Value::from(entry.shape.clone()));
            info.insert("data_offsets".into(), Value::from(vec![offset, end]));
            header.insert(entry.name.clone(), Value::Object(info));
            offset = end;
        }
        let header = serde_json::to_vec(&Value::Object(header)).expect("header serializes");

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for entry in self.entries.values() {
            out.extend_from_slice(&entry.data);
        }
        out
    }
}

fn parse_metadata(info: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = info else {
        return Err(StoreError::MalformedHeader("__metadata__ is not an object".into()));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            other => Err(StoreError::MalformedHeader(format!(
                "__metadata__ value for {k:?} is not a string: {other}"
            ))),
        })
        .collect()
}

fn parse_tensor_info(name: &str, info: &Value) -> Result<(DType, Vec<usize>, usize, usize)> {
    let malformed = |what: &str| StoreError::MalformedHeader(format!("tensor {name:?}: {what}"));
    let obj = info.as_object().ok_or_else(|| malformed("entry is not an object"))?;

    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing string field \"dtype\""))?;
    let dtype = DType::parse(dtype_str).ok_or_else(|| StoreError::UnknownDtype {
        name: name.to_string(),
        dtype: dtype_str.to_string(),
    })?;

    let as_usize_list = |field: &str| -> Result<Vec<usize>> {
        obj.get(field)
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(&format!("missing array field {field:?}")))?
            .iter()
            .map(|v| {
                v.as_u64()
                    .and_then(|n| usize::try_from(n).ok())
                    .ok_or_else(|| malformed(&format!("{field:?} holds a non-integer")))
            })
            .collect()
    };
    let shape = as_usize_list("shape")?;
    let offsets = as_usize_list("data_offsets")?;
    let [begin, end] = offsets[..] else {
        return Err(malformed("\"data_offsets\" must have two elements"));
    };
    Ok((dtype, shape, begin, end))
}
