//! Exact cosine search over an id-addressed embedding matrix.
//!
//! Scores are cosines computed with f64 accumulation and rounded to f32.
//! Equal scores are ordered by ascending insertion index.

mod cemb;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cemb::{decode_index, encode_index, load_index, save_index};

use crate::tensor::dot_f64;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("entry {entry:?}: {reason}")]
    Build { entry: String, reason: String },
    #[error("dimension mismatch: index has {expected}, query has {got}")]
    Dim { expected: usize, got: usize },
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error("{0}")]
    Contract(String),
    #[error("{path}: malformed CEMB at byte {offset}: {reason}")]
    Format {
        path: String,
        offset: usize,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

/// Rows are kept as given when their norm is within this of 1.
pub const NORM_TOLERANCE: f64 = 1e-3;

/// Rows per parallel shard.
const SHARD: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    ids: Vec<String>,
    positions: HashMap<String, usize>,
    matrix: Vec<f32>,
    inv_norms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
}

fn norm(v: &[f32]) -> f64 {
    dot_f64(v, v).sqrt()
}

impl EmbeddingIndex {
    /// l2-normalizes every vector; insertion order is preserved.
    pub fn build(entries: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.1.len());
        let mut ids = Vec::with_capacity(entries.len());
        let mut matrix = Vec::with_capacity(entries.len() * dim);
        for (id, v) in entries {
            let n = norm(&v);
            if v.len() != dim {
                return Err(RetrievalError::Build {
                    entry: id,
                    reason: format!("dimension {} differs from {dim}", v.len()),
                });
            }
            if !(n > 1e-12) || !n.is_finite() {
                return Err(RetrievalError::Build {
                    entry: id,
                    reason: "zero or non-finite vector".into(),
                });
            }
            matrix.extend(v.iter().map(|&x| (x as f64 / n) as f32));
            ids.push(id);
        }
        Self::from_parts(dim, ids, matrix)
    }

    /// Takes rows as stored, renormalizing only those whose norm is off by
    /// more than [`NORM_TOLERANCE`].
    pub fn from_parts(dim: usize, ids: Vec<String>, mut matrix: Vec<f32>) -> Result<Self> {
        if dim == 0 && !ids.is_empty() {
            return Err(RetrievalError::Contract("dimension must be positive".into()));
        }
        if matrix.len() != ids.len() * dim {
            return Err(RetrievalError::Contract(format!(
                "matrix holds {} values, expected {} x {dim}",
                matrix.len(),
                ids.len()
            )));
        }
        let mut positions = HashMap::with_capacity(ids.len());
        let mut inv_norms = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(RetrievalError::Build {
                    entry: id.clone(),
                    reason: "duplicate id".into(),
                });
            }
            let row = &mut matrix[i * dim..(i + 1) * dim];
            let mut n = norm(row);
            if !(n > 1e-12) || !n.is_finite() {
                return Err(RetrievalError::Build {
                    entry: id.clone(),
                    reason: "zero or non-finite vector".into(),
                });
            }
            if (n - 1.0).abs() > NORM_TOLERANCE {
                for x in row.iter_mut() {
                    *x = (*x as f64 / n) as f32;
                }
                n = norm(row);
            }
            inv_norms.push(1.0 / n);
        }
        Ok(Self {
            dim,
            ids,
            positions,
            matrix,
            inv_norms,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    fn query_scale(&self, query: &[f32]) -> Result<f64> {
        if query.len() != self.dim {
            return Err(RetrievalError::Dim {
                expected: self.dim,
                got: query.len(),
            });
        }
        let n = norm(query);
        if !(n > 1e-12) || !n.is_finite() {
            return Err(RetrievalError::Contract("query vector is zero or non-finite".into()));
        }
        Ok(1.0 / n)
    }

    fn score_row(&self, query: &[f32], q_scale: f64, i: usize) -> f32 {
        (dot_f64(query, self.row(i)) * q_scale * self.inv_norms[i]) as f32
    }

    /// Cosine of `query` against every row, in row order.
    pub fn scores(&self, query: &[f32]) -> Result<Vec<f32>> {
        let s = self.query_scale(query)?;
        Ok((0..self.len())
            .into_par_iter()
            .with_min_len(SHARD)
            .map(|i| self.score_row(query, s, i))
            .collect())
    }

    /// The `min(k, len)` best rows, best first.
    pub fn top_k(&self, query: &[f32], k: usize) -> Result<SearchResult> {
        if k == 0 {
            return Err(RetrievalError::Contract("k must be at least 1".into()));
        }
        let s = self.query_scale(query)?;
        let shards: Vec<Vec<Ranked>> = (0..self.len().div_ceil(SHARD))
            .into_par_iter()
            .map(|shard| {
                let rows = shard * SHARD..((shard + 1) * SHARD).min(self.len());
                select(rows.map(|i| Ranked::new(self.score_row(query, s, i), i)), k)
            })
            .collect();
        let merged = select(shards.into_iter().flatten(), k);
        Ok(SearchResult {
            hits: merged
                .into_iter()
                .map(|r| Hit {
                    id: self.ids[r.index].clone(),
                    score: r.score,
                })
                .collect(),
        })
    }

    /// 1-based rank of `target_id`: one plus the rows scoring strictly
    /// higher, plus equal-scoring rows inserted before it.
    pub fn rank_of(&self, query: &[f32], target_id: &str) -> Result<usize> {
        let t = self
            .position(target_id)
            .ok_or_else(|| RetrievalError::UnknownId(target_id.to_string()))?;
        let s = self.query_scale(query)?;
        let target = self.score_row(query, s, t);
        let ahead: usize = (0..self.len())
            .into_par_iter()
            .with_min_len(SHARD)
            .filter(|&i| {
                let v = self.score_row(query, s, i);
                v > target || (v == target && i < t)
            })
            .count();
        Ok(ahead + 1)
    }
}

/// Score with the insertion index as tie-break; `Greater` means better.
#[derive(Clone, Copy, Debug)]
struct Ranked {
    score: f32,
    index: usize,
}

impl Ranked {
    fn new(score: f32, index: usize) -> Self {
        Self { score, index }
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.index.cmp(&self.index))
    }
}

/// Best `k` items, best first, using a bounded min-heap.
fn select(items: impl Iterator<Item = Ranked>, k: usize) -> Vec<Ranked> {
    let mut heap: BinaryHeap<std::cmp::Reverse<Ranked>> = BinaryHeap::with_capacity(k + 1);
    for r in items {
        if heap.len() < k {
            heap.push(std::cmp::Reverse(r));
        } else if let Some(worst) = heap.peek() {
            if r > worst.0 {
                heap.pop();
                heap.push(std::cmp::Reverse(r));
            }
        }
    }
    let mut out: Vec<Ranked> = heap.into_iter().map(|r| r.0).collect();
    out.sort_by(|a, b| b.cmp(a));
    out
}
