//! Box-regression losses: Smooth-L1 plus GIoU, in plain f64 and as tape
//! graphs built from differentiable primitives (abs/min/max/relu/div), so
//! the same definitions serve evaluation and training.
//!
//! Boxes are center-format (x, y, w, h) in the unit square.

use crate::error::Result;
use drivecap_tensor::{Tape, Var};

/// Sum over the four coordinates of the Huber penalty with transition 1.0:
/// quadratic (0.5 d^2) inside |d| < 1, linear (|d| - 0.5) outside.
pub fn smooth_l1(b: [f64; 4], b_hat: [f64; 4]) -> f64 {
    b.iter()
        .zip(&b_hat)
        .map(|(x, y)| {
            let d = (x - y).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum()
}

fn corners(b: [f64; 4]) -> (f64, f64, f64, f64) {
    (
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    )
}

pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    inter / union
}

/// IoU minus the normalized dead area of the smallest enclosing box.
/// Always ≤ IoU, always in (-1, 1]; equals IoU exactly when the enclosing
/// box is fully covered by the union.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    let enc = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    inter / union - (enc - union) / enc
}

pub fn giou_loss(a: [f64; 4], b: [f64; 4]) -> f64 {
    1.0 - giou(a, b)
}

/// Total regression loss: smooth_l1 + (1 - giou). Zero iff the boxes are
/// identical.
pub fn box_loss(b: [f64; 4], b_hat: [f64; 4]) -> f64 {
    smooth_l1(b, b_hat) + giou_loss(b, b_hat)
}

/// Tape version of [`smooth_l1`]. `pred` and `target` are `[1, 4]`.
/// The piecewise branch is expressed as min(|d|, 1): inside the transition
/// the quadratic term covers everything, outside it saturates at 0.5 and
/// the linear remainder |d| - min(|d|,1) takes over.
pub fn smooth_l1_var(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d);
    let ones = tape.constant(vec![1.0; 4], vec![1, 4])?;
    let m = tape.minimum(a, ones)?;
    let quad = tape.mul(m, m)?;
    let quad = tape.scale(quad, 0.5);
    let lin = tape.sub(a, m)?;
    let per_coord = tape.add(quad, lin)?;
    Ok(tape.sum_all(per_coord))
}

struct TapeCorners {
    x1: Var,
    y1: Var,
    x2: Var,
    y2: Var,
    area: Var,
}

fn tape_corners(tape: &mut Tape, b: Var) -> Result<TapeCorners> {
    let x = tape.slice_cols(b, 0, 1)?;
    let y = tape.slice_cols(b, 1, 1)?;
    let w = tape.slice_cols(b, 2, 1)?;
    let h = tape.slice_cols(b, 3, 1)?;
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    let x1 = tape.sub(x, hw)?;
    let x2 = tape.add(x, hw)?;
    let y1 = tape.sub(y, hh)?;
    let y2 = tape.add(y, hh)?;
    let area = tape.mul(w, h)?;
    Ok(TapeCorners { x1, y1, x2, y2, area })
}

/// Tape version of [`giou`]; inputs `[1, 4]`, output a scalar node.
pub fn giou_var(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let p = tape_corners(tape, pred)?;
    let t = tape_corners(tape, target)?;

    let ix1 = tape.maximum(p.x1, t.x1)?;
    let iy1 = tape.maximum(p.y1, t.y1)?;
    let ix2 = tape.minimum(p.x2, t.x2)?;
    let iy2 = tape.minimum(p.y2, t.y2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;

    let areas = tape.add(p.area, t.area)?;
    let union = tape.sub(areas, inter)?;

    let ex1 = tape.minimum(p.x1, t.x1)?;
    let ey1 = tape.minimum(p.y1, t.y1)?;
    let ex2 = tape.maximum(p.x2, t.x2)?;
    let ey2 = tape.maximum(p.y2, t.y2)?;
    let ew = tape.sub(ex2, ex1)?;
    let eh = tape.sub(ey2, ey1)?;
    let enc = tape.mul(ew, eh)?;

    let iou_term = tape.div(inter, union)?;
    let dead = tape.sub(enc, union)?;
    let dead_frac = tape.div(dead, enc)?;
    Ok(tape.sub(iou_term, dead_frac)?)
}

/// Tape version of [`box_loss`]: smooth_l1 + (1 - giou).
pub fn box_loss_var(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let sl1 = smooth_l1_var(tape, pred, target)?;
    let g = giou_var(tape, pred, target)?;
    // The giou node is [1,1]; collapse both terms to plain scalars before
    // combining.
    let g = tape.sum_all(g);
    let one = tape.scalar_const(1.0);
    let gl = tape.sub(one, g)?;
    Ok(tape.add(sl1, gl)?)
}
