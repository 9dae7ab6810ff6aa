//! `BQNT` model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BQNT" | u32 version (=1) | u32 tensor_count
//! per tensor: u32 name_len | name (UTF-8) | u8 dtype (0 = f32) | u8 rank | u32 dims[rank] | u64 offset
//! payloads: f32 values of each tensor, contiguous, in table order
//! graph:    u32 text_len | graph text (UTF-8)
//! ```
//!
//! Offsets are absolute file positions. The loader accepts only the canonical
//! (contiguous, table-ordered) layout so that load/save is byte-identical.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::infer::graph::GraphSpec;
use crate::store::reader::Reader;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"BQNT";
pub const MODEL_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Tensors plus the graph text that binds them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub version: u32,
    pub tensors: Vec<Tensor>,
    pub graph: String,
}

impl ModelFile {
    pub fn new(tensors: Vec<Tensor>, graph: impl Into<String>) -> Result<ModelFile> {
        let model = ModelFile {
            version: MODEL_VERSION,
            tensors,
            graph: graph.into(),
        };
        model.validate()?;
        Ok(model)
    }

    /// Unique names, finite values, consistent shapes, and every graph reference resolved.
    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {}",
                self.version
            )));
        }
        let mut seen = HashSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate tensor name '{}'",
                    t.name
                )));
            }
            if t.shape.is_empty() || t.shape.contains(&0) {
                return Err(Error::Validation(format!(
                    "tensor '{}' has invalid shape {:?}",
                    t.name, t.shape
                )));
            }
            if t.shape.len() > u8::MAX as usize {
                return Err(Error::Validation(format!(
                    "tensor '{}' rank too large",
                    t.name
                )));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Corruption(format!(
                    "tensor '{}': shape {:?} does not match {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            t.check_finite()?;
        }
        let graph = self.graph_spec()?;
        for (layer, name, _) in graph.tensor_refs() {
            if !seen.contains(name) {
                return Err(Error::Validation(format!(
                    "layer {layer} references missing tensor '{name}'"
                )));
            }
        }
        Ok(())
    }

    pub fn graph_spec(&self) -> Result<GraphSpec> {
        GraphSpec::parse(&self.graph)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Total f32 payload in bytes.
    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len() * 4).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header_len: usize = 12
            + self
                .tensors
                .iter()
                .map(|t| 4 + t.name.len() + 2 + 4 * t.shape.len() + 8)
                .sum::<usize>();
        let mut out = Vec::with_capacity(header_len + self.payload_bytes() + 4 + self.graph.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = header_len as u64;
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                let d = u32::try_from(d).map_err(|_| {
                    Error::Validation(format!("tensor '{}' dimension {d} exceeds u32", t.name))
                })?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.data.len() as u64;
        }
        debug_assert_eq!(out.len(), header_len);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.graph.len() as u32).to_le_bytes());
        out.extend_from_slice(self.graph.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelFile> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::Format("bad magic, expected BQNT".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!(
                    "tensor '{name}': unknown dtype tag {dtype}"
                )));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            table.push((name, shape, offset));
        }
        let mut expected = r.position() as u64;
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape, offset) in table {
            if offset != expected {
                return Err(Error::Corruption(format!(
                    "tensor '{name}': offset {offset} but payload expected at {expected}"
                )));
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Corruption(format!("tensor '{name}': shape overflows")))?;
            let raw =
                r.take(count.checked_mul(4).ok_or_else(|| {
                    Error::Corruption(format!("tensor '{name}': shape overflows"))
                })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            expected += raw.len() as u64;
            tensors.push(Tensor { name, shape, data });
        }
        let graph_len = r.u32()? as usize;
        let graph = std::str::from_utf8(r.take(graph_len)?)
            .map_err(|_| Error::Format("graph text is not UTF-8".into()))?
            .to_string();
        if !r.is_empty() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }
        let model = ModelFile {
            version,
            tensors,
            graph,
        };
        model.validate()?;
        Ok(model)
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelFile::from_bytes(&bytes)
}

/// Validates, then writes. Nothing is written when validation fails.
pub fn save_model(model: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = model.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
