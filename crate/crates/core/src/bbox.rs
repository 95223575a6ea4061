//! Axis-aligned boxes in pixel coordinates.
//!
//! `x_min`/`y_min` are inclusive and `x_max`/`y_max` exclusive, so a box
//! covering pixel columns `0..10` is `(0, 0, 10, ..)` and has width 10.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpilError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let all_finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !all_finite || x_min >= x_max || y_min >= y_max {
            return Err(SpilError::invalid(format!(
                "box [{x_min}, {y_min}, {x_max}, {y_max}] is empty or non-finite"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Box of the given size centred at `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x_min: cx - 0.5 * w,
            y_min: cy - 0.5 * h,
            x_max: cx + 0.5 * w,
            y_max: cy + 0.5 * h,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union, in `[0, 1]`.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        Self {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
        }
    }

    /// Clip to `[0, width] x [0, height]`. A box that collapses is kept one
    /// pixel wide against the nearest border so the result stays valid.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        let (x_min, x_max) = clip_axis(self.x_min, self.x_max, width);
        let (y_min, y_max) = clip_axis(self.y_min, self.y_max, height);
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

fn clip_axis(lo: f64, hi: f64, extent: f64) -> (f64, f64) {
    let lo = lo.clamp(0.0, extent);
    let hi = hi.clamp(0.0, extent);
    if hi > lo {
        return (lo, hi);
    }
    let w = extent.min(1.0);
    let start = lo.min(extent - w);
    (start, start + w)
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = SpilError;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_box() {
        assert!(BoundingBox::new(1.0, 1.0, 1.0, 4.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 4.0).is_err());
    }

    #[test]
    fn iou_half_overlap() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BoundingBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn clip_keeps_valid_box() {
        let b = BoundingBox::from_center(-20.0, 5.0, 10.0, 4.0).clip(32.0, 32.0);
        assert!(b.x_max > b.x_min && b.within(32.0, 32.0));
        let inside = BoundingBox::new(2.0, 3.0, 9.0, 12.0).unwrap();
        assert_eq!(inside.clip(32.0, 32.0), inside);
        let partly = BoundingBox::new(-4.0, 3.0, 9.0, 40.0).unwrap().clip(32.0, 32.0);
        assert_eq!(partly.to_array(), [0.0, 3.0, 9.0, 32.0]);
    }

    #[test]
    fn json_is_a_four_array() {
        let b = BoundingBox::new(0.0, 1.0, 2.5, 3.0).unwrap();
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[0.0,1.0,2.5,3.0]");
        let back: BoundingBox = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<BoundingBox>("[3.0,1.0,2.0,3.0]").is_err());
    }
}
