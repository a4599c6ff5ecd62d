//! Axis-aligned box primitives shared by every stage of the pipeline.
//!
//! Boxes use a closed, continuous coordinate convention in full-resolution
//! image pixels (origin top-left). A box's area is
//! `max(0, x2 - x1) * max(0, y2 - y1)`, so a box whose corners coincide on
//! either axis is degenerate and has zero area. Offsets are the four distances
//! from a reference pixel to the box sides.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BoundingBox {
    /// Checked constructor: corners must be finite and ordered.
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox(x1, y1, x2, y2))
        }
    }

    /// Zero-area box sitting on a single point.
    pub const fn point(x: f32, y: f32) -> Self {
        BoundingBox {
            x1: x,
            y1: y,
            x2: x,
            y2: y,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    #[inline]
    pub fn width(&self) -> f32 {
        (self.x2 - self.x1).max(0.0)
    }

    #[inline]
    pub fn height(&self) -> f32 {
        (self.y2 - self.y1).max(0.0)
    }

    #[inline]
    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    /// Closed containment test.
    #[inline]
    pub fn contains(&self, x: f32, y: f32) -> bool {
        self.x1 <= x && x <= self.x2 && self.y1 <= y && y <= self.y2
    }

    #[inline]
    pub fn intersection_area(&self, other: &BoundingBox) -> f32 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Corners as `[x1, y1, x2, y2]`.
    pub fn to_array(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union. Returns 0 when the union has zero area.
#[inline]
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f32 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxOffsets {
    pub l: f32,
    pub t: f32,
    pub r: f32,
    pub b: f32,
}

impl BoxOffsets {
    pub const ZERO: BoxOffsets = BoxOffsets {
        l: 0.0,
        t: 0.0,
        r: 0.0,
        b: 0.0,
    };

    pub fn new(l: f32, t: f32, r: f32, b: f32) -> Self {
        BoxOffsets { l, t, r, b }
    }

    /// Largest of the four distances; drives pyramid level assignment.
    pub fn max_side(&self) -> f32 {
        self.l.max(self.t).max(self.r).max(self.b)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.l >= 0.0 && self.t >= 0.0 && self.r >= 0.0 && self.b >= 0.0
    }
}

/// Distances from `pixel` to the four sides of `bbox`.
pub fn box_to_offsets(bbox: &BoundingBox, pixel: (f32, f32)) -> Result<BoxOffsets> {
    let (x, y) = pixel;
    if !bbox.contains(x, y) {
        return Err(Error::PixelOutsideBox {
            x,
            y,
            x1: bbox.x1,
            y1: bbox.y1,
            x2: bbox.x2,
            y2: bbox.y2,
        });
    }
    Ok(BoxOffsets {
        l: x - bbox.x1,
        t: y - bbox.y1,
        r: bbox.x2 - x,
        b: bbox.y2 - y,
    })
}

#[inline]
pub fn offsets_to_box(offsets: &BoxOffsets, pixel: (f32, f32)) -> BoundingBox {
    let (x, y) = pixel;
    BoundingBox {
        x1: x - offsets.l,
        y1: y - offsets.t,
        x2: x + offsets.r,
        y2: y + offsets.b,
    }
}

/// How well-centred a location is inside its box, in `[0, 1]`.
///
/// Degenerate on either axis (both opposite offsets zero) gives 0.
pub fn centerness(offsets: &BoxOffsets) -> f32 {
    let hmax = offsets.l.max(offsets.r);
    let vmax = offsets.t.max(offsets.b);
    if hmax <= 0.0 || vmax <= 0.0 {
        return 0.0;
    }
    let h = offsets.l.min(offsets.r) / hmax;
    let v = offsets.t.min(offsets.b) / vmax;
    (h * v).sqrt()
}

/// Image pixel at the centre of the receptive field of grid cell `(x, y)`
/// on a feature map with the given stride.
#[inline]
pub fn receptive_center(stride: u32, x: u32, y: u32) -> (u32, u32) {
    let half = stride / 2;
    (half + x * stride, half + y * stride)
}

/// [`receptive_center`] as floating-point coordinates.
#[inline]
pub fn receptive_center_f32(stride: u32, x: usize, y: usize) -> (f32, f32) {
    let (cx, cy) = receptive_center(stride, x as u32, y as u32);
    (cx as f32, cy as f32)
}
