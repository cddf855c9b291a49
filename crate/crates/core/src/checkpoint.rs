//! Named tensor collections and their on-disk container.
//!
//! # Container layout
//!
//! A checkpoint file (conventionally `.ckpt`) is:
//!
//! * bytes 0..8   little-endian u64 header length `H`
//! * bytes 8..8+H UTF-8 JSON: tensor name -> `{ "dtype": "F32" | "F64",
//!   "shape": [..], "data_offsets": [begin, end] }`, plus a
//!   `"__metadata__"` entry holding a string map
//! * the raw little-endian payload; offsets are relative to its start
//!
//! The layout matches a widely deployed tensor container, so files written
//! here can be inspected with standard tooling. Values are widened to f64 on
//! load regardless of stored dtype. Saving writes header keys in sorted
//! order with contiguous offsets, which makes serialization canonical:
//! equal checkpoints produce byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// A weight tensor: 2-D matrices for layer weights, flat vectors for biases
/// and other 1-D state.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Matrix(Matrix),
    Vector(Vec<f64>),
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            Tensor::Matrix(m) => vec![m.rows(), m.cols()],
            Tensor::Vector(v) => vec![v.len()],
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Tensor::Matrix(m) => m.rows() * m.cols(),
            Tensor::Vector(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major view of the entries.
    pub fn values(&self) -> &[f64] {
        match self {
            Tensor::Matrix(m) => m.as_slice(),
            Tensor::Vector(v) => v,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub fn as_matrix(&self) -> Option<&Matrix> {
        match self {
            Tensor::Matrix(m) => Some(m),
            Tensor::Vector(_) => None,
        }
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .values()
                .iter()
                .zip(other.values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Provenance carried alongside the tensors.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub arch: String,
    pub tag: String,
}

/// An ordered map of named tensors plus metadata. Iteration order is always
/// lexicographic in the name, which fixes the canonical flattening order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self { tensors: BTreeMap::new(), meta }
    }

    /// Adds (or replaces) a tensor. Empty or non-finite tensors are rejected.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name == "__metadata__" {
            return Err(Error::FormatViolation(format!("reserved tensor name {name:?}")));
        }
        if tensor.is_empty() {
            return Err(Error::Empty(format!("tensor {name:?}")));
        }
        if !tensor.is_finite() {
            return Err(Error::NonFinite(format!("tensor {name:?}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// True when both checkpoints carry the same names with the same shapes.
    pub fn shape_compatible(&self, other: &Checkpoint) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.iter().zip(other.iter()).all(|((an, at), (bn, bt))| {
                an == bn && at.shape() == bt.shape()
            })
    }

    /// Like [`shape_compatible`](Self::shape_compatible) but as an error.
    pub fn require_compatible(&self, other: &Checkpoint, context: &str) -> Result<()> {
        if self.shape_compatible(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("incompatible checkpoints in {context}")))
        }
    }

    /// Concatenates every tensor (row-major) in lexicographic name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_values());
        for t in self.tensors.values() {
            out.extend_from_slice(t.values());
        }
        out
    }

    /// Bitwise equality of tensors and metadata.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.meta == other.meta && self.tensors_bit_eq(other)
    }

    /// Bitwise equality of the tensors alone, ignoring metadata. Merge
    /// engines relabel step and tag, so weight identity is checked here.
    pub fn tensors_bit_eq(&self, other: &Checkpoint) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.bit_eq(bt))
    }
}

/// Stored element width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }
}

#[derive(Serialize)]
struct HeaderEntry {
    dtype: &'static str,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Saves with full f64 precision.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    save_with_dtype(ckpt, path, Dtype::F64)
}

/// Saves with the given element width. F32 narrows each value with a plain
/// cast; round trips are only bit-exact when every value is F32-representable.
pub fn save_with_dtype(ckpt: &Checkpoint, path: &Path, dtype: Dtype) -> Result<()> {
    if ckpt.tensors.is_empty() {
        return Err(Error::Empty("checkpoint has no tensors".into()));
    }
    let mut header: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    let mut meta: BTreeMap<String, String> = BTreeMap::new();
    meta.insert("step".into(), ckpt.meta.step.to_string());
    meta.insert("seed".into(), ckpt.meta.seed.to_string());
    meta.insert("arch".into(), ckpt.meta.arch.clone());
    meta.insert("tag".into(), ckpt.meta.tag.clone());
    header.insert(
        "__metadata__".into(),
        serde_json::to_value(&meta).expect("string map serializes"),
    );

    let mut payload = Vec::with_capacity(ckpt.total_values() * dtype.size());
    for (name, tensor) in ckpt.iter() {
        let begin = payload.len() as u64;
        match dtype {
            Dtype::F64 => {
                for v in tensor.values() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F32 => {
                for v in tensor.values() {
                    payload.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        let entry = HeaderEntry {
            dtype: dtype.name(),
            shape: tensor.shape(),
            data_offsets: [begin, payload.len() as u64],
        };
        header.insert(
            name.to_string(),
            serde_json::to_value(&entry).expect("header entry serializes"),
        );
    }

    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(8 + header_json.len() + payload.len());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes)?;
    Ok(())
}

/// Loads a checkpoint, widening stored values to f64.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::FormatViolation("file shorter than the 8-byte length prefix".into()));
    }
    let header_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
    let header_len = usize::try_from(header_len)
        .map_err(|_| Error::FormatViolation("header length does not fit in memory".into()))?;
    if bytes.len() < 8 + header_len {
        return Err(Error::FormatViolation(format!(
            "header claims {header_len} bytes but only {} remain",
            bytes.len() - 8
        )));
    }
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| Error::FormatViolation(format!("header is not valid JSON: {e}")))?;
    let header = header
        .as_object()
        .ok_or_else(|| Error::FormatViolation("header is not a JSON object".into()))?;
    let payload = &bytes[8 + header_len..];

    let mut ckpt = Checkpoint::new(CheckpointMeta::default());
    for (name, entry) in header {
        if name == "__metadata__" {
            ckpt.meta = parse_meta(entry)?;
            continue;
        }
        let tensor = parse_tensor(name, entry, payload)?;
        if !tensor.is_finite() {
            return Err(Error::NonFinite(format!("tensor {name:?} in {}", path.display())));
        }
        ckpt.insert(name.clone(), tensor)?;
    }
    if ckpt.tensors.is_empty() {
        return Err(Error::Empty(format!("no tensors in {}", path.display())));
    }
    Ok(ckpt)
}

fn parse_meta(entry: &serde_json::Value) -> Result<CheckpointMeta> {
    let map = entry
        .as_object()
        .ok_or_else(|| Error::FormatViolation("__metadata__ is not an object".into()))?;
    let get = |key: &str| -> Result<String> {
        match map.get(key) {
            None => Ok(String::new()),
            Some(serde_json::Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(Error::FormatViolation(format!("metadata {key:?} is not a string"))),
        }
    };
    let parse_u64 = |key: &str, raw: String| -> Result<u64> {
        if raw.is_empty() {
            return Ok(0);
        }
        raw.parse()
            .map_err(|_| Error::FormatViolation(format!("metadata {key:?} is not an integer")))
    };
    Ok(CheckpointMeta {
        step: parse_u64("step", get("step")?)?,
        seed: parse_u64("seed", get("seed")?)?,
        arch: get("arch")?,
        tag: get("tag")?,
    })
}

fn parse_tensor(name: &str, entry: &serde_json::Value, payload: &[u8]) -> Result<Tensor> {
    let obj = entry
        .as_object()
        .ok_or_else(|| Error::FormatViolation(format!("entry {name:?} is not an object")))?;
    let dtype = match obj.get("dtype").and_then(|d| d.as_str()) {
        Some("F32") => Dtype::F32,
        Some("F64") => Dtype::F64,
        other => {
            return Err(Error::FormatViolation(format!(
                "tensor {name:?} has unsupported dtype {other:?}"
            )))
        }
    };
    let shape: Vec<usize> = obj
        .get("shape")
        .and_then(|s| s.as_array())
        .ok_or_else(|| Error::FormatViolation(format!("tensor {name:?} lacks a shape array")))?
        .iter()
        .map(|d| {
            d.as_u64()
                .and_then(|d| usize::try_from(d).ok())
                .filter(|&d| d > 0)
                .ok_or_else(|| {
                    Error::FormatViolation(format!("tensor {name:?} has a bad dimension"))
                })
        })
        .collect::<Result<_>>()?;
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::FormatViolation(format!(
            "tensor {name:?} must be 1-D or 2-D, got {} dims",
            shape.len()
        )));
    }
    let offsets = obj
        .get("data_offsets")
        .and_then(|o| o.as_array())
        .filter(|o| o.len() == 2)
        .ok_or_else(|| Error::FormatViolation(format!("tensor {name:?} lacks data_offsets")))?;
    let begin = offsets[0].as_u64().map(usize::try_from).and_then(|r| r.ok());
    let end = offsets[1].as_u64().map(usize::try_from).and_then(|r| r.ok());
    let (begin, end) = match (begin, end) {
        (Some(b), Some(e)) if b <= e => (b, e),
        _ => {
            return Err(Error::FormatViolation(format!(
                "tensor {name:?} has malformed data_offsets"
            )))
        }
    };
    if end > payload.len() {
        return Err(Error::FormatViolation(format!(
            "tensor {name:?} extends to byte {end} but the payload holds {}",
            payload.len()
        )));
    }
    let span = end - begin;
    if span % dtype.size() != 0 {
        return Err(Error::FormatViolation(format!(
            "tensor {name:?} spans {span} bytes, not a multiple of {}",
            dtype.size()
        )));
    }
    let count = span / dtype.size();
    let expected: usize = shape.iter().product();
    if count != expected {
        return Err(Error::ShapeMismatch(format!(
            "tensor {name:?} declares shape {shape:?} ({expected} values) but stores {count}"
        )));
    }

    let raw = &payload[begin..end];
    let values: Vec<f64> = match dtype {
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok(match shape.len() {
        1 => Tensor::Vector(values),
        _ => Tensor::Matrix(Matrix::from_vec(shape[0], shape[1], values).map_err(|_| {
            Error::NonFinite(format!("tensor {name:?} holds non-finite values"))
        })?),
    })
}
