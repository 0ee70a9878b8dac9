//! Axis-aligned boxes in continuous pixel coordinates.
//!
//! A [`BBox`] is stored as top-left corner plus size. Boxes with non-positive
//! size can only be built through [`BBox::degenerate`]; they act as the "empty"
//! operand for overlap measures and as the result of clipping a box that lies
//! entirely outside the image.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest magnitude accepted for the log-size components when decoding.
/// `exp(10)` is already a 22000x scale change.
const MAX_LOG_RATIO: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box size must be positive and finite, got {w}x{h}")]
    InvalidSize { w: f64, h: f64 },
    #[error("box origin must be finite, got ({x}, {y})")]
    InvalidOrigin { x: f64, y: f64 },
    #[error("anchor box is degenerate")]
    DegenerateAnchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if !x.is_finite() || !y.is_finite() {
            return Err(GeometryError::InvalidOrigin { x, y });
        }
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(GeometryError::InvalidSize { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    /// Box with zero extent. Overlap with it is always zero.
    pub const fn degenerate() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            w: 0.0,
            h: 0.0,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0)
    }

    pub fn area(&self) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            self.w * self.h
        }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        if self.is_degenerate() || other.is_degenerate() {
            return 0.0;
        }
        let iw = overlap(self.x, self.w, other.x, other.w);
        let ih = overlap(self.y, self.h, other.y, other.h);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Whether `self` lies fully inside `[0, width] x [0, height]`.
    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }

    /// Multiply every coordinate by `factor`.
    pub fn scaled(&self, factor: f64) -> BBox {
        BBox {
            x: self.x * factor,
            y: self.y * factor,
            w: self.w * factor,
            h: self.h * factor,
        }
    }
}

/// Center offsets relative to the anchor size and log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl RegressionTarget {
    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Self { tx, ty, tw, th }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

/// Intersection over union; zero when either box is degenerate.
/// Length of the overlap of `[a, a + la]` and `[b, b + lb]`. When one interval
/// contains the other its own length is returned, so a box always overlaps
/// itself by exactly its area.
fn overlap(a: f64, la: f64, b: f64, lb: f64) -> f64 {
    let lo = a.max(b);
    let hi = (a + la).min(b + lb);
    if lo == a && hi == a + la {
        la
    } else if lo == b && hi == b + lb {
        lb
    } else {
        hi - lo
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Dice coefficient `2|a∩b| / (|a| + |b|)`.
pub fn dice(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    2.0 * inter / (a.area() + b.area())
}

pub fn encode(anchor: &BBox, gt: &BBox) -> Result<RegressionTarget, GeometryError> {
    if anchor.is_degenerate() {
        return Err(GeometryError::DegenerateAnchor);
    }
    if gt.is_degenerate() {
        return Err(GeometryError::InvalidSize { w: gt.w, h: gt.h });
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Ok(RegressionTarget {
        tx: (gcx - acx) / anchor.w,
        ty: (gcy - acy) / anchor.h,
        tw: (gt.w / anchor.w).ln(),
        th: (gt.h / anchor.h).ln(),
    })
}

/// Inverse of [`encode`]. Log-size components are clamped to a finite range so
/// the result always has positive size.
pub fn decode(anchor: &BBox, t: &RegressionTarget) -> BBox {
    let (acx, acy) = anchor.center();
    let cx = acx + t.tx * anchor.w;
    let cy = acy + t.ty * anchor.h;
    let w = anchor.w * t.tw.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
    let h = anchor.h * t.th.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
    BBox {
        x: cx - 0.5 * w,
        y: cy - 0.5 * h,
        w,
        h,
    }
}

/// Intersect `b` with `[0, width] x [0, height]`; degenerate if nothing remains.
pub fn clip(b: &BBox, width: f64, height: f64) -> BBox {
    if b.is_degenerate() {
        return BBox::degenerate();
    }
    let x0 = b.x.clamp(0.0, width);
    let y0 = b.y.clamp(0.0, height);
    let x1 = b.right().clamp(0.0, width);
    let y1 = b.bottom().clamp(0.0, height);
    if x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
        return BBox::degenerate();
    }
    BBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    }
}
