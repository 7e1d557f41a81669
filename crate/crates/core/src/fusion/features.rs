//! Id-keyed feature tables and their little-endian file format:
//!
//! ```text
//! "KENYFEAT" | u32 version=1 | u8 modality (0 image, 1 text) | u32 dim | u64 count
//! count x ( u32 id_len | id bytes (UTF-8) | dim x f32 )
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FEATURE_MAGIC: &[u8; 8] = b"KENYFEAT";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: not a KENYFEAT feature file")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown modality byte {0}")]
    BadModality(u8),
    #[error("truncated feature file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("duplicate example id {id:?} at offset {offset}")]
    DuplicateId { id: String, offset: usize },
    #[error("example id at offset {offset} is not valid UTF-8")]
    InvalidId { offset: usize },
    #[error("{extra} unexpected bytes after the last record at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("row {id:?} has {got} values, table dim is {dim}")]
    DimMismatch { id: String, dim: usize, got: usize },
    #[error("row {id:?} contains a non-finite value")]
    NonFinite { id: String },
    #[error("dimension {0} does not fit the file format")]
    TooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    fn byte(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self, FeatureError> {
        match b {
            0 => Ok(Modality::Image),
            1 => Ok(Modality::Text),
            other => Err(FeatureError::BadModality(other)),
        }
    }
}

/// Fixed-dimension vectors keyed by example id, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    modality: Modality,
    dim: usize,
    rows: IndexMap<String, Vec<f32>>,
}

impl FeatureTable {
    pub fn new(modality: Modality, dim: usize) -> Self {
        Self {
            modality,
            dim,
            rows: IndexMap::new(),
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.rows.get(id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.rows.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    /// Adds a row; ids must be new, values finite and `dim` long.
    pub fn insert(&mut self, id: impl Into<String>, values: Vec<f32>) -> Result<(), FeatureError> {
        let id = id.into();
        if values.len() != self.dim {
            return Err(FeatureError::DimMismatch {
                id,
                dim: self.dim,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite { id });
        }
        if self.rows.contains_key(&id) {
            return Err(FeatureError::DuplicateId { id, offset: 0 });
        }
        self.rows.insert(id, values);
        Ok(())
    }

    /// Same ids, every value zero.
    pub fn zeroed(&self) -> Self {
        Self {
            modality: self.modality,
            dim: self.dim,
            rows: self.rows.keys().map(|k| (k.clone(), vec![0.0; self.dim])).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FeatureError> {
        let dim = u32::try_from(self.dim).map_err(|_| FeatureError::TooLarge(self.dim))?;
        let mut out = Vec::with_capacity(25 + self.rows.len() * (8 + 4 * self.dim));
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.push(self.modality.byte());
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        for (id, values) in &self.rows {
            let len = u32::try_from(id.len()).map_err(|_| FeatureError::TooLarge(id.len()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != FEATURE_MAGIC {
            return Err(FeatureError::BadMagic);
        }
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(FeatureError::UnsupportedVersion(version));
        }
        let modality = Modality::from_byte(r.take(1)?[0])?;
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        let mut table = Self::new(modality, dim);
        for _ in 0..count {
            let record_offset = r.pos;
            let id_len = r.u32()? as usize;
            let id_offset = r.pos;
            let id = std::str::from_utf8(r.take(id_len)?)
                .map_err(|_| FeatureError::InvalidId { offset: id_offset })?
                .to_string();
            let raw = r.take(dim * 4)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            if table.rows.contains_key(&id) {
                return Err(FeatureError::DuplicateId {
                    id,
                    offset: record_offset,
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(FeatureError::NonFinite { id });
            }
            table.rows.insert(id, values);
        }
        if r.pos != bytes.len() {
            return Err(FeatureError::TrailingBytes {
                offset: r.pos,
                extra: bytes.len() - r.pos,
            });
        }
        Ok(table)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), FeatureError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FeatureError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FeatureError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FeatureError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FeatureError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureTable, FeatureError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    FeatureTable::from_bytes(&bytes)
}
