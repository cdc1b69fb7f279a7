//! Box overlap summaries. Boxes are (cx, cy, w, h) in normalized image
//! coordinates; extents must be positive but boxes are otherwise taken as
//! given (a regressor can emit a box poking past the frame).

use serde::{Deserialize, Serialize};

use crate::error::{MetricError, Result};

fn corners(b: [f64; 4]) -> (f64, f64, f64, f64) {
    (
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    )
}

fn check(b: [f64; 4]) -> Result<()> {
    if b.iter().all(|v| v.is_finite()) && b[2] > 0.0 && b[3] > 0.0 {
        Ok(())
    } else {
        Err(MetricError::DegenerateBox { b })
    }
}

/// Intersection over union in [0, 1].
pub fn iou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    check(a)?;
    check(b)?;
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    // Areas from the same corner arithmetic as the intersection, so
    // identical boxes give inter == area exactly and IoU is exactly 1.
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    let union = area_a + area_b - inter;
    Ok(inter / union)
}

/// Mean IoU over (ground truth, prediction) pairs, as a percentage.
pub fn miou(pairs: &[([f64; 4], [f64; 4])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut sum = 0.0;
    for &(a, b) in pairs {
        sum += iou(a, b)?;
    }
    Ok(100.0 * sum / pairs.len() as f64)
}

/// Fraction of pairs with IoU strictly above `tau`, as a percentage.
pub fn acc_at(pairs: &[([f64; 4], [f64; 4])], tau: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut hits = 0usize;
    for &(a, b) in pairs {
        if iou(a, b)? > tau {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

/// Ground-truth-area thresholds separating small / medium / large boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketThresholds {
    /// Areas strictly below this are small.
    pub small_below: f64,
    /// Areas at or above this are large; the middle band is medium.
    pub large_from: f64,
}

impl Default for BucketThresholds {
    fn default() -> Self {
        BucketThresholds {
            small_below: 0.01,
            large_from: 0.1,
        }
    }
}

/// Mean IoU per ground-truth size bucket. An empty bucket is `None`, never
/// a zero that would read as "measured and failed".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub small: Option<f64>,
    pub medium: Option<f64>,
    pub large: Option<f64>,
    pub count_small: usize,
    pub count_medium: usize,
    pub count_large: usize,
}

impl BucketStats {
    pub fn total(&self) -> usize {
        self.count_small + self.count_medium + self.count_large
    }
}

/// Bucket pairs by ground-truth area and average IoU within each bucket.
/// Pairs are (ground truth, prediction).
pub fn size_bucketed_iou(
    pairs: &[([f64; 4], [f64; 4])],
    thresholds: BucketThresholds,
) -> Result<BucketStats> {
    if !(thresholds.small_below > 0.0 && thresholds.small_below < thresholds.large_from) {
        return Err(MetricError::BadThresholds {
            small_below: thresholds.small_below,
            large_from: thresholds.large_from,
        });
    }
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for &(gt, pred) in pairs {
        let v = iou(gt, pred)?;
        let area = gt[2] * gt[3];
        let k = if area < thresholds.small_below {
            0
        } else if area < thresholds.large_from {
            1
        } else {
            2
        };
        sums[k] += v;
        counts[k] += 1;
    }
    let mean = |k: usize| (counts[k] > 0).then(|| 100.0 * sums[k] / counts[k] as f64);
    Ok(BucketStats {
        small: mean(0),
        medium: mean(1),
        large: mean(2),
        count_small: counts[0],
        count_medium: counts[1],
        count_large: counts[2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_are_unit_iou() {
        let b = [0.3, 0.4, 0.2, 0.1];
        assert_eq!(iou(b, b).unwrap(), 1.0);
    }

    #[test]
    fn nested_quarter_overlap() {
        let v = iou([0.5, 0.5, 0.4, 0.4], [0.5, 0.5, 0.2, 0.2]).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
    }

    #[test]
    fn disjoint_boxes_and_strict_accuracy() {
        let pair = ([0.2, 0.2, 0.2, 0.2], [0.8, 0.8, 0.2, 0.2]);
        assert_eq!(iou(pair.0, pair.1).unwrap(), 0.0);
        assert_eq!(acc_at(&[pair], 0.0).unwrap(), 0.0); // strict: 0 > 0 fails
    }

    #[test]
    fn accuracy_threshold_is_strict() {
        // IoU exactly 0.5: two unit-height halves sharing half their width.
        let a = [0.375, 0.5, 0.75, 1.0];
        let b = [0.625, 0.5, 0.75, 1.0];
        let v = iou(a, b).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert_eq!(acc_at(&[(a, b)], 0.5).unwrap(), 0.0);
        assert_eq!(acc_at(&[(a, b)], 0.49).unwrap(), 100.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(iou([0.5, 0.5, 0.0, 0.1], [0.5, 0.5, 0.1, 0.1]).is_err());
        assert!(iou([0.5, 0.5, 0.1, 0.1], [0.5, 0.5, 0.1, f64::NAN]).is_err());
    }

    #[test]
    fn all_large_boxes_fill_only_large_bucket() {
        let pairs: Vec<_> = (0..5)
            .map(|_| ([0.5, 0.5, 0.5, 0.5], [0.5, 0.5, 0.5, 0.5]))
            .collect();
        let s = size_bucketed_iou(&pairs, BucketThresholds::default()).unwrap();
        assert_eq!(s.small, None);
        assert_eq!(s.medium, None);
        assert_eq!(s.large, Some(100.0));
        assert_eq!(s.total(), 5);
    }

    #[test]
    fn one_box_per_bucket_identical_predictions() {
        let pairs = [
            ([0.5, 0.5, 0.05, 0.05], [0.5, 0.5, 0.05, 0.05]), // area 0.0025
            ([0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]),     // area 0.04
            ([0.5, 0.5, 0.5, 0.5], [0.5, 0.5, 0.5, 0.5]),     // area 0.25
        ];
        let s = size_bucketed_iou(&pairs, BucketThresholds::default()).unwrap();
        assert_eq!(
            (s.small, s.medium, s.large),
            (Some(100.0), Some(100.0), Some(100.0))
        );
        assert_eq!((s.count_small, s.count_medium, s.count_large), (1, 1, 1));
    }
}
