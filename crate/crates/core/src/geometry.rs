//! Axis-aligned pixel boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box with inclusive-exclusive pixel coordinates `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let finite = [x0, y0, x1, y1].iter().all(|v| v.is_finite());
        if !finite || x0 >= x1 || y0 >= y1 {
            return Err(Error::Usage(format!("malformed box ({x0}, {y0}, {x1}, {y1})")));
        }
        Ok(BoundingBox { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= width as f64 && self.y1 <= height as f64
    }

    /// Box from center and extents, clamped to a `width × height` frame.
    /// Degenerate results collapse to at least one pixel inside the frame.
    pub fn from_center_clamped(cx: f64, cy: f64, w: f64, h: f64, width: usize, height: usize) -> Self {
        let (fw, fh) = (width as f64, height as f64);
        let clamp_axis = |c: f64, e: f64, limit: f64| {
            let lo = (c - e / 2.0).clamp(0.0, limit - 1.0);
            let hi = (c + e / 2.0).clamp(lo + 1.0, limit);
            (lo, hi.max(lo + 1.0).min(limit))
        };
        let (x0, x1) = clamp_axis(cx, w.max(0.0), fw);
        let (y0, y1) = clamp_axis(cy, h.max(0.0), fh);
        BoundingBox { x0, y0, x1, y1 }
    }
}
