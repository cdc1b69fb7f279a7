//! Frozen visual front end: seeded patch embeddings for both raster
//! resolutions plus a deterministic region-proposal stand-in.
//!
//! Nothing in here trains. The backbone weights are drawn once from named
//! seed streams and the callers treat the outputs as constants, matching a
//! setup where pretrained encoders are kept frozen and only the adapters
//! on top learn.

use crate::error::Result;
use drivecap_scenes::{NormBox, Raster};
use drivecap_tensor::{SeedRng, Tensor};

/// Square patch edge shared by both resolutions.
pub const PATCH: usize = 32;
/// Low-resolution grid edge: 224 / 32.
pub const LO_GRID: usize = 7;
/// High-resolution grid edge: 384 / 32.
pub const HI_GRID: usize = 12;
/// Tokens per low-resolution raster.
pub const LO_TOKENS: usize = LO_GRID * LO_GRID;
/// Tokens per high-resolution raster.
pub const HI_TOKENS: usize = HI_GRID * HI_GRID;

const PATCH_DIM: usize = PATCH * PATCH * 3;

/// Detector proposal count bounds (inclusive).
pub const MIN_PROPOSALS: usize = 10;
pub const MAX_PROPOSALS: usize = 24;

/// Frozen patch-embedding weights for both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    pub w_lo: Tensor,
    pub b_lo: Tensor,
    pub w_hi: Tensor,
    pub b_hi: Tensor,
}

impl FrozenBackbone {
    pub fn new(seed: u64, c_bb_lo: usize, c_bb_hi: usize) -> Self {
        FrozenBackbone {
            w_lo: frozen_matrix(seed, "backbone.lo.w", PATCH_DIM, c_bb_lo),
            b_lo: frozen_matrix(seed, "backbone.lo.b", 1, c_bb_lo),
            w_hi: frozen_matrix(seed, "backbone.hi.w", PATCH_DIM, c_bb_hi),
            b_hi: frozen_matrix(seed, "backbone.hi.b", 1, c_bb_hi),
        }
    }

    /// 7x7 patch tokens, row-major over the grid: `[49, c_bb_lo]`.
    pub fn encode_lo(&self, raster: &Raster) -> Result<Tensor> {
        encode_grid(raster, LO_GRID, &self.w_lo, &self.b_lo)
    }

    /// 12x12 patch tokens: `[144, c_bb_hi]`.
    pub fn encode_hi(&self, raster: &Raster) -> Result<Tensor> {
        encode_grid(raster, HI_GRID, &self.w_hi, &self.b_hi)
    }
}

fn frozen_matrix(seed: u64, name: &str, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    let mut rng = SeedRng::named(seed, name);
    let data = rng.uniform_vec(rows * cols, -bound, bound);
    let shape = if rows == 1 { vec![cols] } else { vec![rows, cols] };
    Tensor::new(data, shape).expect("frozen shape")
}

fn encode_grid(raster: &Raster, grid: usize, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    debug_assert_eq!(raster.width, grid * PATCH, "raster/grid mismatch");
    debug_assert_eq!(raster.height, grid * PATCH);
    let c = b.numel();
    let mut out = vec![0.0; grid * grid * c];
    let mut patch = vec![0.0; PATCH_DIM];
    for gr in 0..grid {
        for gc in 0..grid {
            // Flatten one 32x32x3 patch, normalized to [0, 1].
            let mut i = 0;
            for dy in 0..PATCH {
                let row = gr * PATCH + dy;
                let base = (row * raster.width + gc * PATCH) * 3;
                for v in &raster.data[base..base + PATCH * 3] {
                    patch[i] = *v as f64 / 255.0;
                    i += 1;
                }
            }
            let tok = &mut out[(gr * grid + gc) * c..(gr * grid + gc + 1) * c];
            tok.copy_from_slice(&b.data);
            drivecap_tensor::kernels::matmul_acc(&patch, &w.data, 1, PATCH_DIM, c, tok);
        }
    }
    Ok(Tensor::new(out, vec![grid * grid, c])?)
}

/// Output of the region-proposal stand-in, scores descending.
#[derive(Debug, Clone, PartialEq)]
pub struct Regions {
    /// `[n, c_bb_lo + 4]`: pooled patch features with the proposal box
    /// (center x, center y, width, height) appended.
    pub features: Tensor,
    pub boxes: Vec<NormBox>,
    pub scores: Vec<f64>,
}

/// Deterministic proposal generator keyed by `(seed, record id)`.
///
/// When `gt` is given (training records), the first-ranked proposal is the
/// ground-truth box under a small relative jitter, so at least one proposal
/// always overlaps the risk object at IoU > 0.5. Remaining proposals are
/// random boxes with lower scores.
pub fn detect_regions(
    seed: u64,
    record_id: &str,
    lo_tokens: &Tensor,
    gt: Option<&NormBox>,
) -> Result<Regions> {
    let mut rng = SeedRng::named(seed, &format!("detector.{record_id}"));
    let n = MIN_PROPOSALS + rng.below(MAX_PROPOSALS - MIN_PROPOSALS + 1);

    let mut scored: Vec<(f64, NormBox)> = Vec::with_capacity(n);
    if let Some(gt) = gt {
        scored.push((rng.range(0.8, 1.0), jitter_box(&mut rng, gt)));
    }
    while scored.len() < n {
        let w = rng.range(0.05, 0.5);
        let h = rng.range(0.05, 0.5);
        let x = rng.range(w / 2.0, 1.0 - w / 2.0);
        let y = rng.range(h / 2.0, 1.0 - h / 2.0);
        let b = NormBox { x, y, w, h };
        scored.push((rng.range(0.05, 0.8), b));
    }
    // Highest score first; the jittered ground truth (if any) stays on top
    // because its score range sits above the distractor range.
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

    let c = lo_tokens.last_dim();
    let width = c + 4;
    let mut features = vec![0.0; scored.len() * width];
    for (i, (_, b)) in scored.iter().enumerate() {
        let row = &mut features[i * width..(i + 1) * width];
        pool_under_box(lo_tokens, b, &mut row[..c]);
        row[c..].copy_from_slice(&b.as_array());
    }
    Ok(Regions {
        features: Tensor::new(features, vec![scored.len(), width])?,
        scores: scored.iter().map(|(s, _)| *s).collect(),
        boxes: scored.into_iter().map(|(_, b)| b).collect(),
    })
}

/// Relative jitter: the center moves by at most 5% of the box extent per
/// axis and the extent rescales by at most 5%, then the box is clamped
/// back into the unit square. Relative (not absolute) jitter keeps
/// IoU(proposal, gt) > 0.5 even for the smallest objects.
fn jitter_box(rng: &mut SeedRng, gt: &NormBox) -> NormBox {
    let x = gt.x + rng.range(-0.05, 0.05) * gt.w;
    let y = gt.y + rng.range(-0.05, 0.05) * gt.h;
    let w = gt.w * (1.0 + rng.range(-0.05, 0.05));
    let h = gt.h * (1.0 + rng.range(-0.05, 0.05));
    clamp_into_unit(x, y, w, h)
}

fn clamp_into_unit(x: f64, y: f64, w: f64, h: f64) -> NormBox {
    let w = w.clamp(1e-4, 1.0);
    let h = h.clamp(1e-4, 1.0);
    let x = x.clamp(w / 2.0, 1.0 - w / 2.0);
    let y = y.clamp(h / 2.0, 1.0 - h / 2.0);
    NormBox { x, y, w, h }
}

/// Mean of the patch tokens whose grid cells overlap the box. A box always
/// overlaps at least the cell containing its center, but guard anyway by
/// falling back to the global mean.
fn pool_under_box(lo_tokens: &Tensor, b: &NormBox, out: &mut [f64]) {
    let grid = (lo_tokens.rows() as f64).sqrt() as usize;
    let c = lo_tokens.last_dim();
    let (bx1, by1, bx2, by2) = b.corners();
    let mut count = 0usize;
    out.iter_mut().for_each(|v| *v = 0.0);
    for gr in 0..grid {
        for gc in 0..grid {
            let (cx1, cy1) = (gc as f64 / grid as f64, gr as f64 / grid as f64);
            let (cx2, cy2) = ((gc + 1) as f64 / grid as f64, (gr + 1) as f64 / grid as f64);
            let inter_w = bx2.min(cx2) - bx1.max(cx1);
            let inter_h = by2.min(cy2) - by1.max(cy1);
            if inter_w > 0.0 && inter_h > 0.0 {
                let tok = &lo_tokens.data[(gr * grid + gc) * c..(gr * grid + gc + 1) * c];
                for (o, t) in out.iter_mut().zip(tok) {
                    *o += t;
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        for row in 0..lo_tokens.rows() {
            let tok = &lo_tokens.data[row * c..(row + 1) * c];
            for (o, t) in out.iter_mut().zip(tok) {
                *o += t;
            }
        }
        count = lo_tokens.rows();
    }
    let inv = 1.0 / count as f64;
    out.iter_mut().for_each(|v| *v *= inv);
}

#[cfg(test)]
mod tests {
    use super::*;
    use drivecap_scenes::{HI_SIDE, LO_SIDE};

    fn iou(a: &NormBox, b: &NormBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = a.corners();
        let (bx1, by1, bx2, by2) = b.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        inter / (a.area() + b.area() - inter)
    }

    #[test]
    fn zero_raster_gives_identical_bias_tokens() {
        let bb = FrozenBackbone::new(0, 24, 16);
        let lo = bb.encode_lo(&Raster::filled(LO_SIDE, LO_SIDE, [0, 0, 0])).unwrap();
        assert_eq!(lo.shape, vec![LO_TOKENS, 24]);
        for row in 0..LO_TOKENS {
            assert_eq!(&lo.data[row * 24..(row + 1) * 24], &bb.b_lo.data[..]);
        }
        let hi = bb.encode_hi(&Raster::filled(HI_SIDE, HI_SIDE, [0, 0, 0])).unwrap();
        for row in 0..HI_TOKENS {
            assert_eq!(&hi.data[row * 16..(row + 1) * 16], &bb.b_hi.data[..]);
        }
    }

    #[test]
    fn single_patch_change_only_moves_its_token() {
        let bb = FrozenBackbone::new(1, 24, 16);
        let blank = Raster::filled(LO_SIDE, LO_SIDE, [10, 20, 30]);
        let mut marked = blank.clone();
        // Paint inside grid cell (2, 3) only.
        for dy in 0..PATCH {
            for dx in 0..PATCH {
                marked.put(2 * PATCH + dy, 3 * PATCH + dx, [200, 100, 50]);
            }
        }
        let a = bb.encode_lo(&blank).unwrap();
        let b = bb.encode_lo(&marked).unwrap();
        let hot = 2 * LO_GRID + 3;
        for row in 0..LO_TOKENS {
            let same = a.data[row * 24..(row + 1) * 24] == b.data[row * 24..(row + 1) * 24];
            assert_eq!(same, row != hot, "token {row}");
        }
    }

    #[test]
    fn encoding_is_deterministic_across_instances() {
        let r = Raster::filled(LO_SIDE, LO_SIDE, [90, 120, 33]);
        let a = FrozenBackbone::new(7, 32, 24).encode_lo(&r).unwrap();
        let b = FrozenBackbone::new(7, 32, 24).encode_lo(&r).unwrap();
        assert_eq!(a, b);
        let c = FrozenBackbone::new(8, 32, 24).encode_lo(&r).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn proposal_counts_stay_in_bounds_and_scores_descend() {
        let bb = FrozenBackbone::new(0, 24, 16);
        let lo = bb.encode_lo(&Raster::filled(LO_SIDE, LO_SIDE, [50, 60, 70])).unwrap();
        let mut seen_min = usize::MAX;
        let mut seen_max = 0;
        for i in 0..200 {
            let r = detect_regions(0, &format!("rec-{i}"), &lo, None).unwrap();
            assert!(r.boxes.len() >= MIN_PROPOSALS && r.boxes.len() <= MAX_PROPOSALS);
            assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
            assert_eq!(r.features.shape, vec![r.boxes.len(), 24 + 4]);
            seen_min = seen_min.min(r.boxes.len());
            seen_max = seen_max.max(r.boxes.len());
            for b in &r.boxes {
                b.validate().unwrap();
            }
        }
        assert!(seen_min < seen_max, "count should actually vary");
    }

    #[test]
    fn ground_truth_yields_a_high_iou_top_proposal() {
        let bb = FrozenBackbone::new(3, 24, 16);
        let lo = bb.encode_lo(&Raster::filled(LO_SIDE, LO_SIDE, [5, 5, 5])).unwrap();
        // Include a tiny box: relative jitter must keep IoU > 0.5 there too.
        let gts = [
            NormBox { x: 0.5, y: 0.5, w: 0.3, h: 0.2 },
            NormBox { x: 0.1, y: 0.85, w: 0.045, h: 0.05 },
            NormBox { x: 0.93, y: 0.07, w: 0.12, h: 0.09 },
        ];
        for (i, gt) in gts.iter().enumerate() {
            for trial in 0..50 {
                let r = detect_regions(11, &format!("g{i}-t{trial}"), &lo, Some(gt)).unwrap();
                let best = r
                    .boxes
                    .iter()
                    .map(|b| iou(b, gt))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(best > 0.5, "gt {i} trial {trial}: best IoU {best}");
                // The top-scored proposal is the jittered ground truth.
                assert!(iou(&r.boxes[0], gt) > 0.5);
            }
        }
    }

    #[test]
    fn uniform_raster_pools_to_the_shared_token_value() {
        // On a constant raster every patch token is identical, so pooled
        // features equal that token no matter which box is proposed.
        let bb = FrozenBackbone::new(5, 24, 16);
        let lo = bb.encode_lo(&Raster::filled(LO_SIDE, LO_SIDE, [0, 0, 0])).unwrap();
        let r = detect_regions(5, "rec-0", &lo, None).unwrap();
        for i in 0..r.boxes.len() {
            let feat = &r.features.data[i * 28..i * 28 + 24];
            for (f, b) in feat.iter().zip(&bb.b_lo.data) {
                assert!((f - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn detector_is_deterministic_per_record_id() {
        let bb = FrozenBackbone::new(0, 24, 16);
        let lo = bb.encode_lo(&Raster::filled(LO_SIDE, LO_SIDE, [9, 9, 9])).unwrap();
        let a = detect_regions(0, "scene-00042", &lo, None).unwrap();
        let b = detect_regions(0, "scene-00042", &lo, None).unwrap();
        assert_eq!(a, b);
        let c = detect_regions(0, "scene-00043", &lo, None).unwrap();
        assert_ne!(a.boxes, c.boxes);
    }
}
