//! Bounding-box arithmetic and IoU-based labeling of region proposals.
//!
//! Boxes use continuous coordinates with corner-exclusive area
//! (x_max - x_min) * (y_max - y_min); there is no +1 pixel convention.

use crate::error::GeometryError;
use serde::{Deserialize, Serialize};

/// Axis-aligned bounding box in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        if x_min > x_max || y_min > y_max || !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite()) {
            return Err(GeometryError::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn from_corners(c: [f64; 4]) -> Result<Self, GeometryError> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

/// Intersection over union of two boxes. Zero when either box or the union
/// has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let area_a = a.area();
    let area_b = b.area();
    if area_a == 0.0 || area_b == 0.0 {
        return 0.0;
    }
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// IoU thresholds for proposal labeling and evaluation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RegionLabeling {
    /// Proposals strictly above this IoU are positives.
    pub positive_threshold: f64,
    /// Proposals strictly below this IoU are negatives.
    pub negative_threshold: f64,
    /// A localization hit requires IoU at or above this value.
    pub eval_threshold: f64,
}

impl Default for RegionLabeling {
    fn default() -> Self {
        RegionLabeling {
            positive_threshold: 0.7,
            negative_threshold: 0.3,
            eval_threshold: 0.5,
        }
    }
}

impl RegionLabeling {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = 0.0 <= self.negative_threshold
            && self.negative_threshold < self.eval_threshold
            && self.eval_threshold <= self.positive_threshold
            && self.positive_threshold <= 1.0;
        if !ok {
            return Err(GeometryError::InvalidThresholds {
                negative: self.negative_threshold,
                eval: self.eval_threshold,
                positive: self.positive_threshold,
            });
        }
        Ok(())
    }
}

/// Label assigned to a proposal relative to a ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalLabel {
    /// IoU strictly above the positive threshold.
    Positive,
    /// IoU strictly below the negative threshold.
    Negative,
    /// Neither sampled as positive nor as negative.
    Ignore,
}

/// Partition proposals into positive / negative / ignore bands around the
/// ground-truth box. The partition is disjoint and exhaustive.
pub fn label_proposals(gt: &BBox, proposals: &[BBox], r: &RegionLabeling) -> Vec<ProposalLabel> {
    proposals
        .iter()
        .map(|p| {
            let v = iou(gt, p);
            if v > r.positive_threshold {
                ProposalLabel::Positive
            } else if v < r.negative_threshold {
                ProposalLabel::Negative
            } else {
                ProposalLabel::Ignore
            }
        })
        .collect()
}

/// Smallest axis-aligned box containing every input box.
pub fn merge_boxes(boxes: &[BBox]) -> Result<BBox, GeometryError> {
    let first = boxes.first().ok_or(GeometryError::EmptyBoxList)?;
    let mut out = *first;
    for b in &boxes[1..] {
        out.x_min = out.x_min.min(b.x_min);
        out.y_min = out.y_min.min(b.y_min);
        out.x_max = out.x_max.max(b.x_max);
        out.y_max = out.y_max.max(b.y_max);
    }
    Ok(out)
}
