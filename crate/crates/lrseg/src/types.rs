//! Shared domain types: feature vectors, segment records, reference sets,
//! and label rasters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rle::RleMask;

pub const LABEL_FREE: u8 = 0;
pub const LABEL_OBSTACLE: u8 = 1;
pub const LABEL_IGNORE: u8 = 255;

/// A segment-level embedding of fixed dimensionality.
///
/// Stored as `f32` to match the on-disk payload; estimators widen to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f32>,
}

impl FeatureVector {
    /// Rejects empty vectors and non-finite entries.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyFeature);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector"));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_f32(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// One segment produced by the mask generator: feature, mask, quality scores,
/// and the prompt that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub image_id: u32,
    pub segment_id: u32,
    pub feature: FeatureVector,
    pub mask: RleMask,
    pub predicted_iou: f32,
    pub stability_score: f32,
    pub prompt_xy: (i32, i32),
}

impl SegmentRecord {
    /// Checks the per-record score invariants.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("predicted_iou", self.predicted_iou),
            ("stability_score", self.stability_score),
        ] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::MalformedMetadata(format!(
                    "{name} = {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Which distribution a reference set models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetKind {
    Free,
    Obstacle,
}

/// A matrix of reference feature vectors for one distribution.
///
/// Rows are validated at construction: at least one row, consistent
/// dimensionality, finite entries, and no zero-norm rows (cosine similarity
/// would be undefined for those).
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    kind: SetKind,
    rows: Vec<Vec<f64>>,
}

impl ReferenceSet {
    pub fn new(kind: SetKind, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyReferenceSet);
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::EmptyFeature);
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimMismatch(format!(
                    "reference row {i} has {} entries, expected {dim}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("reference set row"));
            }
            if row.iter().map(|v| v * v).sum::<f64>() == 0.0 {
                return Err(Error::ZeroNormRow(i));
            }
        }
        Ok(Self { kind, rows })
    }

    pub fn from_records(kind: SetKind, records: &[SegmentRecord]) -> Result<Self> {
        let rows = records.iter().map(|r| r.feature.to_f64()).collect();
        Self::new(kind, rows)
    }

    pub fn kind(&self) -> SetKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Returns a copy with every row scaled to unit L2 norm.
    pub fn normalized(&self) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter().map(|v| v / norm).collect()
            })
            .collect();
        Self {
            kind: self.kind,
            rows,
        }
    }
}

/// Per-pixel ground truth or prediction raster.
///
/// Values are restricted to 0 (free), 1 (obstacle), 255 (ignore).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: u32,
    width: u32,
    pixels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: u32, width: u32, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height as usize * width as usize {
            return Err(Error::ShapeMismatch(format!(
                "label map has {} pixels, expected {}x{}",
                pixels.len(),
                height,
                width
            )));
        }
        if let Some(&bad) = pixels
            .iter()
            .find(|&&p| p != LABEL_FREE && p != LABEL_OBSTACLE && p != LABEL_IGNORE)
        {
            return Err(Error::IllegalLabelValue(bad));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: u32, x: u32) -> u8 {
        self.pixels[(y * self.width + x) as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_vector_rejects_nan_and_empty() {
        assert!(matches!(
            FeatureVector::new(vec![]),
            Err(Error::EmptyFeature)
        ));
        assert!(matches!(
            FeatureVector::new(vec![1.0, f32::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(FeatureVector::new(vec![1.0, 2.0]).unwrap().dim(), 2);
    }

    #[test]
    fn reference_set_rejects_zero_rows_and_ragged_input() {
        assert!(matches!(
            ReferenceSet::new(SetKind::Free, vec![]),
            Err(Error::EmptyReferenceSet)
        ));
        assert!(matches!(
            ReferenceSet::new(SetKind::Free, vec![vec![0.0, 0.0]]),
            Err(Error::ZeroNormRow(0))
        ));
        assert!(ReferenceSet::new(SetKind::Free, vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn normalization_yields_unit_rows() {
        let set = ReferenceSet::new(
            SetKind::Obstacle,
            vec![vec![3.0, 4.0], vec![0.5, 0.0], vec![-2.0, 2.0]],
        )
        .unwrap()
        .normalized();
        for row in set.rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6, "norm {norm}");
        }
    }

    #[test]
    fn label_map_rejects_illegal_values() {
        assert!(matches!(
            LabelMap::new(1, 2, vec![0, 7]),
            Err(Error::IllegalLabelValue(7))
        ));
        assert!(LabelMap::new(1, 3, vec![0, 1, 255]).is_ok());
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
    }
}
