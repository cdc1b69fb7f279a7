//! Procedural raster drawing. Geometry is specified in normalized [0,1]²
//! coordinates so the 224px and 384px views of a scene depict the same
//! layout; a pixel belongs to a shape when its center falls inside.

use crate::types::{NormBox, Raster, Scenario};

/// Muted tones for non-risk shapes — deliberately far from every
/// `ObjectColor::rgb` so the risk object is the only saturated thing.
pub const DISTRACTOR_COLORS: [[u8; 3]; 4] = [
    [105, 105, 105],
    [125, 118, 100],
    [96, 108, 96],
    [118, 100, 118],
];

/// Background color at a normalized position. Each scenario gets its own
/// base tone plus a coarse structural pattern, so 32×32 patch averages
/// already separate the three classes.
pub fn background_rgb(scenario: Scenario, x: f64, y: f64) -> [u8; 3] {
    match scenario {
        Scenario::Urban => {
            if y < 0.25 {
                [182, 186, 190] // sky band
            } else if ((x * 14.0) as usize) % 4 == 0 {
                [124, 124, 127] // lane stripes
            } else {
                [150, 150, 152]
            }
        }
        Scenario::Narrow => {
            if x < 0.125 || x >= 0.875 {
                [84, 77, 69] // walls hugging the road
            } else {
                [168, 160, 148]
            }
        }
        Scenario::Intersection => {
            let in_h_band = (0.375..0.625).contains(&y);
            let in_v_band = (0.375..0.625).contains(&x);
            if in_h_band || in_v_band {
                [110, 112, 116] // crossing carriageways
            } else {
                [141, 146, 150]
            }
        }
    }
}

pub fn draw_background(raster: &mut Raster, scenario: Scenario) {
    let (h, w) = (raster.height, raster.width);
    for r in 0..h {
        let y = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            raster.put(r, c, background_rgb(scenario, x, y));
        }
    }
}

/// Fill `b` with `rgb`; ellipse shapes are inscribed in the box. Pixels are
/// included when their center lies inside, so filled pixels never stray more
/// than half a pixel outside the box.
pub fn draw_shape(raster: &mut Raster, b: &NormBox, ellipse: bool, rgb: [u8; 3]) {
    let (x1, y1, x2, y2) = b.corners();
    let (h, w) = (raster.height as f64, raster.width as f64);
    let r0 = (y1 * h).floor().max(0.0) as usize;
    let r1 = ((y2 * h).ceil() as usize).min(raster.height);
    let c0 = (x1 * w).floor().max(0.0) as usize;
    let c1 = ((x2 * w).ceil() as usize).min(raster.width);
    let (rx, ry) = (b.w / 2.0, b.h / 2.0);
    for r in r0..r1 {
        let y = (r as f64 + 0.5) / h;
        if y < y1 || y > y2 {
            continue;
        }
        for c in c0..c1 {
            let x = (c as f64 + 0.5) / w;
            if x < x1 || x > x2 {
                continue;
            }
            if ellipse {
                let dx = (x - b.x) / rx;
                let dy = (y - b.y) / ry;
                if dx * dx + dy * dy > 1.0 {
                    continue;
                }
            }
            raster.put(r, c, rgb);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{LO_SIDE};

    #[test]
    fn backgrounds_differ_between_scenarios() {
        let p = |s| background_rgb(s, 0.5, 0.8);
        let (u, n, i) = (
            p(Scenario::Urban),
            p(Scenario::Narrow),
            p(Scenario::Intersection),
        );
        assert_ne!(u, n);
        assert_ne!(n, i);
        assert_ne!(u, i);
    }

    #[test]
    fn rectangle_pixels_stay_within_half_pixel_of_box() {
        let mut r = Raster::filled(LO_SIDE, LO_SIDE, [0, 0, 0]);
        let b = NormBox::new(0.4, 0.6, 0.21, 0.13).unwrap();
        draw_shape(&mut r, &b, false, [255, 0, 0]);
        let (x1, y1, x2, y2) = b.corners();
        let half = 0.5 / LO_SIDE as f64;
        let mut painted = 0usize;
        for row in 0..LO_SIDE {
            for col in 0..LO_SIDE {
                if r.get(row, col) == [255, 0, 0] {
                    painted += 1;
                    let y = (row as f64 + 0.5) / LO_SIDE as f64;
                    let x = (col as f64 + 0.5) / LO_SIDE as f64;
                    assert!(x >= x1 - half && x <= x2 + half);
                    assert!(y >= y1 - half && y <= y2 + half);
                }
            }
        }
        // And the fill really covers the interior, not just a sliver.
        let expect = (b.w * b.h * (LO_SIDE * LO_SIDE) as f64 * 0.8) as usize;
        assert!(painted > expect, "painted {painted}");
    }

    #[test]
    fn ellipse_is_confined_and_smaller_than_rectangle() {
        let b = NormBox::new(0.5, 0.5, 0.3, 0.2).unwrap();
        let mut re = Raster::filled(LO_SIDE, LO_SIDE, [0, 0, 0]);
        let mut rr = Raster::filled(LO_SIDE, LO_SIDE, [0, 0, 0]);
        draw_shape(&mut re, &b, true, [1, 2, 3]);
        draw_shape(&mut rr, &b, false, [1, 2, 3]);
        let count = |r: &Raster| r.data.chunks(3).filter(|p| *p == [1, 2, 3]).count();
        let (e, rect) = (count(&re), count(&rr));
        assert!(e > 0 && e < rect);
        // π/4 of the rectangle, loosely.
        assert!((e as f64 / rect as f64 - std::f64::consts::FRAC_PI_4).abs() < 0.05);
    }
}
