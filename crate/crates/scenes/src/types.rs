//! Record types for the synthetic driving-scene dataset.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SceneError};

pub const LO_SIDE: usize = 224;
pub const HI_SIDE: usize = 384;
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Urban,
    Narrow,
    Intersection,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Urban, Scenario::Narrow, Scenario::Intersection];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Urban => "urban",
            Scenario::Narrow => "narrow",
            Scenario::Intersection => "intersection",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Car,
    Truck,
    Bus,
    Van,
    Cyclist,
    Pedestrian,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Car,
        Category::Truck,
        Category::Bus,
        Category::Van,
        Category::Cyclist,
        Category::Pedestrian,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Car => "car",
            Category::Truck => "truck",
            Category::Bus => "bus",
            Category::Van => "van",
            Category::Cyclist => "cyclist",
            Category::Pedestrian => "pedestrian",
        }
    }

    /// Vehicles render as rectangles, vulnerable road users as ellipses.
    pub fn is_ellipse(self) -> bool {
        matches!(self, Category::Cyclist | Category::Pedestrian)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectColor {
    Red,
    Blue,
    Yellow,
    Magenta,
    Cyan,
    Orange,
}

impl ObjectColor {
    pub const ALL: [ObjectColor; 6] = [
        ObjectColor::Red,
        ObjectColor::Blue,
        ObjectColor::Yellow,
        ObjectColor::Magenta,
        ObjectColor::Cyan,
        ObjectColor::Orange,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectColor::Red => "red",
            ObjectColor::Blue => "blue",
            ObjectColor::Yellow => "yellow",
            ObjectColor::Magenta => "magenta",
            ObjectColor::Cyan => "cyan",
            ObjectColor::Orange => "orange",
        }
    }

    /// Saturated fill colors, far from every background/distractor tone.
    pub fn rgb(self) -> [u8; 3] {
        match self {
            ObjectColor::Red => [230, 40, 40],
            ObjectColor::Blue => [40, 80, 230],
            ObjectColor::Yellow => [235, 220, 40],
            ObjectColor::Magenta => [225, 45, 215],
            ObjectColor::Cyan => [45, 220, 220],
            ObjectColor::Orange => [240, 140, 30],
        }
    }
}

/// Thirds of the image, named from the ego-car's perspective (top of the
/// frame is far away).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowBand {
    Far,
    Middle,
    Near,
}

impl RowBand {
    pub fn as_str(self) -> &'static str {
        match self {
            RowBand::Far => "far",
            RowBand::Middle => "middle",
            RowBand::Near => "near",
        }
    }

    pub fn from_y(y: f64) -> Self {
        match (y * 3.0) as usize {
            0 => RowBand::Far,
            1 => RowBand::Middle,
            _ => RowBand::Near,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColBand {
    Left,
    Center,
    Right,
}

impl ColBand {
    pub fn as_str(self) -> &'static str {
        match self {
            ColBand::Left => "left",
            ColBand::Center => "center",
            ColBand::Right => "right",
        }
    }

    pub fn from_x(x: f64) -> Self {
        match (x * 3.0) as usize {
            0 => ColBand::Left,
            1 => ColBand::Center,
            _ => ColBand::Right,
        }
    }
}

/// Everything the caption templates key on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectAttrs {
    pub category: Category,
    pub color: ObjectColor,
    pub row: RowBand,
    pub col: ColBand,
}

/// Axis-aligned box, center + extents, in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = NormBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.w > 0.0
            && self.h > 0.0
            && self.x - self.w / 2.0 >= -1e-9
            && self.x + self.w / 2.0 <= 1.0 + 1e-9
            && self.y - self.h / 2.0 >= -1e-9
            && self.y + self.h / 2.0 <= 1.0 + 1e-9
            && [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(SceneError::BadBox {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
            })
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// (x1, y1, x2, y2)
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        NormBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn overlaps(&self, other: &NormBox) -> bool {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        ax1 < bx2 && bx1 < ax2 && ay1 < by2 && by1 < ay2
    }
}

/// Row-major H×W×3 image with u8 channels; semantic pixel values are
/// byte / 255 in [0, 1].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Raster {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn put(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let at = (row * self.width + col) * CHANNELS;
        self.data[at..at + CHANNELS].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let at = (row * self.width + col) * CHANNELS;
        [self.data[at], self.data[at + 1], self.data[at + 2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub scenario: Scenario,
    /// Ordered clauses: scenario, risk object, intention, suggestion.
    pub caption: [String; 4],
    pub box_: NormBox,
    pub object_attrs: ObjectAttrs,
    pub raster_lo: Raster,
    pub raster_hi: Raster,
}

impl SceneRecord {
    pub fn caption_text(&self) -> String {
        self.caption.join(" ")
    }

    pub fn validate(&self) -> Result<()> {
        self.box_.validate()?;
        debug_assert!(self.caption.iter().all(|c| !c.is_empty()));
        debug_assert_eq!(self.raster_lo.height, LO_SIDE);
        debug_assert_eq!(self.raster_lo.width, LO_SIDE);
        debug_assert_eq!(self.raster_hi.height, HI_SIDE);
        debug_assert_eq!(self.raster_hi.width, HI_SIDE);
        Ok(())
    }
}
