//! Exact nearest-neighbour scoring by average cosine similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ReferenceSet;

pub const DEFAULT_K: usize = 5;

/// Reference rows stored with unit L2 norm, queried by exact linear scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnIndex {
    pub rows: Vec<Vec<f64>>,
    pub k: usize,
}

impl KnnIndex {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    /// Mean of the k largest cosine similarities between `t` and the stored
    /// rows. Ties on similarity are broken toward the lower row index.
    pub fn avg_topk_similarity(&self, t: &[f64]) -> Result<f64> {
        if t.len() != self.dim() {
            return Err(Error::DimMismatch(format!(
                "query has {} entries, index expects {}",
                t.len(),
                self.dim()
            )));
        }
        let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroQueryVector);
        }
        let mut sims: Vec<(f64, usize)> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let dot: f64 = row.iter().zip(t).map(|(a, b)| a * b).sum();
                (dot / norm, i)
            })
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let sum: f64 = sims[..self.k].iter().map(|&(s, _)| s).sum();
        Ok(sum / self.k as f64)
    }

    /// Structural invariants: unit rows, consistent dims, k in range.
    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::EmptyReferenceSet);
        }
        if self.k == 0 || self.k > self.rows.len() {
            return Err(Error::KTooLarge {
                k: self.k,
                n: self.rows.len(),
            });
        }
        let dim = self.dim();
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimMismatch(format!("index row {i}")));
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                return Err(Error::ZeroNormRow(i));
            }
        }
        Ok(())
    }
}

/// Normalizes the reference rows and stores them for exact search.
pub fn build_index(refset: &ReferenceSet, k: usize) -> Result<KnnIndex> {
    let n = refset.len();
    if n == 0 {
        return Err(Error::EmptyReferenceSet);
    }
    if k == 0 || k > n {
        return Err(Error::KTooLarge { k, n });
    }
    Ok(KnnIndex {
        rows: refset.normalized().rows().to_vec(),
        k,
    })
}

/// Ratio of average top-k similarities, obstacle over free.
///
/// A non-positive denominator yields the +infinity sentinel when the
/// numerator is positive, and the tie value 1 when both are non-positive.
pub fn knn_ratio(obstacle: &KnnIndex, free: &KnnIndex, t: &[f64]) -> Result<f64> {
    if obstacle.dim() != free.dim() {
        return Err(Error::DimMismatch(format!(
            "index dims differ: {} vs {}",
            obstacle.dim(),
            free.dim()
        )));
    }
    let num = obstacle.avg_topk_similarity(t)?;
    let den = free.avg_topk_similarity(t)?;
    Ok(if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        1.0
    })
}
