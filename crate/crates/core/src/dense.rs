//! Exact maximum-inner-product search over precomputed embeddings.
//!
//! Vectors are stored as `f32` and scored with sequential `f64` accumulation
//! per row. Only the scan across rows is parallel, so results are the same
//! bits for any thread count.
//!
//! File layout (little-endian):
//!
//! ```text
//! "RGE1" | u32 version=1 | u32 dim | u64 count
//! count*dim f32, row-major
//! count * (u16 byte length, UTF-8 id)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::ranking::{to_scored, ScoredDoc, TopK};

const MAGIC: &[u8; 4] = b"RGE1";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;
/// Rows per parallel work unit.
const SHARD_ROWS: usize = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum DenseError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("bad magic bytes {found:?}, expected \"RGE1\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported embedding format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated {section}: expected {expected} bytes, found {actual}")]
    Truncated {
        section: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("embedding dimension must be positive")]
    ZeroDimension,
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("id at row {0} is not valid UTF-8")]
    InvalidUtf8(usize),
    #[error("id at row {row} is {len} bytes, longer than the u16 limit")]
    IdTooLong { row: usize, len: usize },
    #[error("{ids} ids for {rows} rows")]
    RowCountMismatch { ids: usize, rows: usize },
    #[error("size overflow computing payload length")]
    Overflow,
    #[error("empty score list")]
    EmptyScores,
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Row-major `count × dim` matrix of passage embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self, DenseError> {
        if dim == 0 {
            return Err(DenseError::ZeroDimension);
        }
        if data.len() != ids.len() * dim {
            return Err(DenseError::RowCountMismatch {
                ids: ids.len(),
                rows: data.len() / dim,
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(DenseError::DuplicateId(id.clone()));
            }
            if id.len() > usize::from(u16::MAX) {
                return Err(DenseError::IdTooLong { row, len: id.len() });
            }
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(DenseError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(Self { dim, ids, data })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self, DenseError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(DenseError::DimensionMismatch {
                expected: dim,
                actual: bad.len(),
            });
        }
        if ids.len() != rows.len() {
            return Err(DenseError::RowCountMismatch {
                ids: ids.len(),
                rows: rows.len(),
            });
        }
        Self::new(dim, ids, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_by_id(&self, id: &str) -> Option<&[f32]> {
        self.ids.iter().position(|x| x == id).map(|i| self.row(i))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let id_bytes: usize = self.ids.iter().map(|id| 2 + id.len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4 + id_bytes);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.count() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DenseError> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                return Err(DenseError::BadMagic {
                    found: bytes[..4].to_vec(),
                });
            }
            return Err(DenseError::Truncated {
                section: "header",
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(DenseError::BadMagic {
                found: bytes[..4].to_vec(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(DenseError::UnsupportedVersion(version));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        if dim == 0 {
            return Err(DenseError::ZeroDimension);
        }
        let count = usize::try_from(count).map_err(|_| DenseError::Overflow)?;
        let vector_len = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or(DenseError::Overflow)?;
        let rest = &bytes[HEADER_LEN..];
        if rest.len() < vector_len {
            return Err(DenseError::Truncated {
                section: "vectors",
                expected: vector_len,
                actual: rest.len(),
            });
        }
        let (vec_bytes, mut id_bytes) = rest.split_at(vector_len);
        let data: Vec<f32> = vec_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut ids = Vec::with_capacity(count);
        for row in 0..count {
            if id_bytes.len() < 2 {
                return Err(DenseError::Truncated {
                    section: "id length",
                    expected: 2,
                    actual: id_bytes.len(),
                });
            }
            let len = usize::from(u16::from_le_bytes([id_bytes[0], id_bytes[1]]));
            id_bytes = &id_bytes[2..];
            if id_bytes.len() < len {
                return Err(DenseError::Truncated {
                    section: "id",
                    expected: len,
                    actual: id_bytes.len(),
                });
            }
            let id =
                std::str::from_utf8(&id_bytes[..len]).map_err(|_| DenseError::InvalidUtf8(row))?;
            ids.push(id.to_string());
            id_bytes = &id_bytes[len..];
        }
        if !id_bytes.is_empty() {
            return Err(DenseError::TrailingBytes(id_bytes.len()));
        }
        Self::new(dim, ids, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DenseError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| DenseError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Exact top-`k` rows by inner product with `query`, best first, ties by
    /// ascending id.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<ScoredDoc>, DenseError> {
        self.search_sharded(query, k, SHARD_ROWS)
    }

    /// [`search`](Self::search) with an explicit number of rows per parallel
    /// work unit. The result does not depend on `shard_rows`.
    pub fn search_sharded(
        &self,
        query: &[f32],
        k: usize,
        shard_rows: usize,
    ) -> Result<Vec<ScoredDoc>, DenseError> {
        self.check_dim(query)?;
        let shard_rows = shard_rows.max(1);
        let top = (0..self.count())
            .into_par_iter()
            .step_by(shard_rows)
            .map(|start| {
                let end = (start + shard_rows).min(self.count());
                let mut local = TopK::new(k);
                for row in start..end {
                    local.push(row, &self.ids[row], dot_unchecked(query, self.row(row)));
                }
                local
            })
            .reduce(|| TopK::new(k), TopK::merge);
        Ok(to_scored(&self.ids, top.into_sorted()))
    }

    fn check_dim(&self, query: &[f32]) -> Result<(), DenseError> {
        if query.len() != self.dim {
            return Err(DenseError::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        Ok(())
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, DenseError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DenseError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    EmbeddingMatrix::from_bytes(&bytes)
}

#[inline]
fn dot_unchecked(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

/// Inner product accumulated left to right in `f64`.
pub fn dot(q: &[f32], d: &[f32]) -> Result<f64, DenseError> {
    if q.len() != d.len() {
        return Err(DenseError::DimensionMismatch {
            expected: q.len(),
            actual: d.len(),
        });
    }
    Ok(dot_unchecked(q, d))
}

/// Softmax over retrieval scores, `p(d|q) ∝ exp(score)`, stabilized by
/// subtracting the maximum.
pub fn retrieval_distribution(scores: &[f64]) -> Result<Vec<f64>, DenseError> {
    if scores.is_empty() {
        return Err(DenseError::EmptyScores);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(DenseError::NonFiniteScore(i));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
