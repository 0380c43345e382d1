//! Self-describing tensor archive: a JSON manifest (name, dtype tag, shape,
//! byte offset) followed by row-major little-endian payloads, plus a string
//! metadata map. Checkpoints and feature files share this container; the
//! byte layout is platform-independent.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TTAR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl TensorEntry {
    pub fn elem_count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    entries: Vec<TensorEntry>,
    metadata: BTreeMap<String, String>,
}

#[derive(Debug, Default)]
pub struct ArchiveWriter {
    entries: Vec<TensorEntry>,
    metadata: BTreeMap<String, String>,
    payload: Vec<u8>,
}

impl ArchiveWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn add_f32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f32]) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let offset = self.payload.len() as u64;
        for v in data {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push(TensorEntry {
            name: name.into(),
            dtype: DType::F32,
            shape,
            offset,
        });
    }

    pub fn add_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let offset = self.payload.len() as u64;
        for v in data {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push(TensorEntry {
            name: name.into(),
            dtype: DType::F64,
            shape,
            offset,
        });
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let manifest = Manifest {
            entries: self.entries.clone(),
            metadata: self.metadata.clone(),
        };
        let mjson = serde_json::to_vec(&manifest)
            .map_err(|e| Error::Archive(format!("manifest encode: {e}")))?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
        f.write_all(&VERSION.to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        f.write_all(&(mjson.len() as u64).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        f.write_all(&mjson).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.payload).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct Archive {
    pub entries: Vec<TensorEntry>,
    pub metadata: BTreeMap<String, String>,
    payload: Vec<u8>,
}

impl Archive {
    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(Error::Archive(format!(
                "{}: not a tensor archive",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Archive(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + mlen {
            return Err(Error::Archive(format!(
                "{}: truncated manifest",
                path.display()
            )));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
            .map_err(|e| Error::Archive(format!("{}: corrupt manifest: {e}", path.display())))?;
        let payload = bytes[16 + mlen..].to_vec();
        for e in &manifest.entries {
            let end = e.offset as usize + e.elem_count() * e.dtype.size();
            if end > payload.len() {
                return Err(Error::Archive(format!(
                    "{}: tensor '{}' extends past payload",
                    path.display(),
                    e.name
                )));
            }
        }
        Ok(Archive {
            entries: manifest.entries,
            metadata: manifest.metadata,
            payload,
        })
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Archive(format!("tensor '{name}' not found")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Archive(format!("metadata '{key}' not found")))
    }

    pub fn tensor_f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let e = self.entry(name)?;
        if e.dtype != DType::F32 {
            return Err(Error::Archive(format!("tensor '{name}' is not f32")));
        }
        let start = e.offset as usize;
        let data = self.payload[start..start + 4 * e.elem_count()]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok((e.shape.clone(), data))
    }

    pub fn tensor_f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let e = self.entry(name)?;
        if e.dtype != DType::F64 {
            return Err(Error::Archive(format!("tensor '{name}' is not f64")));
        }
        let start = e.offset as usize;
        let data = self.payload[start..start + 8 * e.elem_count()]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok((e.shape.clone(), data))
    }
}
