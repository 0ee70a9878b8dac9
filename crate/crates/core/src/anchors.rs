//! Attention-restricted anchor grid.
//!
//! The attention region is a fractional sub-rectangle of the feature grid.
//! Only positions inside it are evaluated by the proposal head, and only their
//! anchors take part in the loss. With the identity region `(0, 1, 0, 1)` the
//! grid is the full `W x H` sliding-window search space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

/// Slack applied before rounding fractional bounds so that bounds landing on
/// an integer are not pushed off it by floating-point error.
const ROUNDING_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnchorError {
    #[error("anchor spec needs at least one area and one ratio")]
    EmptySpec,
    #[error("anchor areas must be positive and finite, got {0}")]
    InvalidArea(f64),
    #[error("anchor ratios must be positive and finite, got {0}")]
    InvalidRatio(f64),
    #[error("stride must be at least 1")]
    InvalidStride,
    #[error("attention region bounds must satisfy 0 <= lo < hi <= 1, got {axis}: [{lo}, {hi}]")]
    InvalidRegion { axis: &'static str, lo: f64, hi: f64 },
    #[error("grid must be at least 1x1, got {0}x{1}")]
    InvalidGrid(usize, usize),
}

/// Reference shapes placed at every evaluated grid position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorSpec {
    /// Anchor areas in square pixels.
    pub areas: Vec<f64>,
    /// Width:height ratios (`0.5` is a box twice as tall as it is wide).
    pub ratios: Vec<f64>,
    /// Pixel distance between adjacent grid positions.
    pub stride: usize,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            areas: vec![66.0 * 66.0, 150.0 * 150.0],
            ratios: vec![0.5, 0.75],
            stride: 16,
        }
    }
}

impl AnchorSpec {
    /// Six-shape pyramid used for the unrestricted comparison runs: the default
    /// areas with a square ratio added.
    pub fn baseline() -> Self {
        Self {
            ratios: vec![0.5, 0.75, 1.0],
            ..Self::default()
        }
    }

    /// Anchors per grid position.
    pub fn k(&self) -> usize {
        self.areas.len() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<(), AnchorError> {
        if self.areas.is_empty() || self.ratios.is_empty() {
            return Err(AnchorError::EmptySpec);
        }
        if let Some(&a) = self.areas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(AnchorError::InvalidArea(a));
        }
        if let Some(&r) = self.ratios.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(AnchorError::InvalidRatio(r));
        }
        if self.stride == 0 {
            return Err(AnchorError::InvalidStride);
        }
        Ok(())
    }
}

/// Fractional bounds of the search space along each feature-grid axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionRegion {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for AttentionRegion {
    /// 15% shrink from every side.
    fn default() -> Self {
        Self {
            x_min: 0.15,
            x_max: 0.85,
            y_min: 0.15,
            y_max: 0.85,
        }
    }
}

impl AttentionRegion {
    pub const IDENTITY: AttentionRegion = AttentionRegion {
        x_min: 0.0,
        x_max: 1.0,
        y_min: 0.0,
        y_max: 1.0,
    };

    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self, AnchorError> {
        let r = Self {
            x_min,
            x_max,
            y_min,
            y_max,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), AnchorError> {
        let check = |axis, lo: f64, hi: f64| {
            if (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo < hi {
                Ok(())
            } else {
                Err(AnchorError::InvalidRegion { axis, lo, hi })
            }
        };
        check("x", self.x_min, self.x_max)?;
        check("y", self.y_min, self.y_max)
    }

    /// Fit a region around the anchor-grid positions of the given box centers,
    /// widened by `margin` (a fraction of the grid extent) on every side.
    pub fn fit_to_boxes(
        boxes: &[BBox],
        geom: GridGeometry,
        stride: usize,
        margin: f64,
    ) -> Option<AttentionRegion> {
        if boxes.is_empty() {
            return None;
        }
        let frac = |c: f64, n: usize| {
            if n <= 1 {
                0.5
            } else {
                ((c / stride as f64 - 0.5) / (n - 1) as f64).clamp(0.0, 1.0)
            }
        };
        let (mut x0, mut x1, mut y0, mut y1) = (1.0f64, 0.0f64, 1.0f64, 0.0f64);
        for b in boxes {
            let (cx, cy) = b.center();
            let fx = frac(cx, geom.width);
            let fy = frac(cy, geom.height);
            x0 = x0.min(fx);
            x1 = x1.max(fx);
            y0 = y0.min(fy);
            y1 = y1.max(fy);
        }
        let region = AttentionRegion {
            x_min: (x0 - margin).max(0.0),
            x_max: (x1 + margin).min(1.0),
            y_min: (y0 - margin).max(0.0),
            y_max: (y1 + margin).min(1.0),
        };
        region.validate().ok().map(|_| region)
    }
}

/// Feature-grid size in positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub width: usize,
    pub height: usize,
}

impl GridGeometry {
    pub fn new(width: usize, height: usize) -> Result<Self, AnchorError> {
        if width == 0 || height == 0 {
            return Err(AnchorError::InvalidGrid(width, height));
        }
        Ok(Self { width, height })
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridPos {
    // Field order gives row-major ordering under the derived `Ord`.
    pub gy: usize,
    pub gx: usize,
}

impl GridPos {
    pub fn new(gx: usize, gy: usize) -> Self {
        Self { gx, gy }
    }
}

/// Inclusive integer bounds of the attention region on a particular grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridBounds {
    pub gx_min: usize,
    pub gx_max: usize,
    pub gy_min: usize,
    pub gy_max: usize,
}

impl GridBounds {
    pub fn contains(&self, pos: GridPos) -> bool {
        (self.gx_min..=self.gx_max).contains(&pos.gx) && (self.gy_min..=self.gy_max).contains(&pos.gy)
    }

    pub fn count(&self) -> usize {
        (self.gx_max - self.gx_min + 1) * (self.gy_max - self.gy_min + 1)
    }
}

fn axis_bounds(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let extent = (n - 1) as f64;
    let a = (lo * extent - ROUNDING_SLACK).ceil().max(0.0) as usize;
    let b = ((hi * extent + ROUNDING_SLACK).floor() as usize).min(n - 1);
    (a <= b).then_some((a, b))
}

/// Integer bounds of `region` on `geom`, `None` when rounding empties it.
pub fn grid_bounds(geom: GridGeometry, region: &AttentionRegion) -> Option<GridBounds> {
    let (gx_min, gx_max) = axis_bounds(region.x_min, region.x_max, geom.width)?;
    let (gy_min, gy_max) = axis_bounds(region.y_min, region.y_max, geom.height)?;
    Some(GridBounds {
        gx_min,
        gx_max,
        gy_min,
        gy_max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionStatus {
    Ok,
    /// The bounds crossed after rounding; no position is evaluated.
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPositions {
    pub positions: Vec<GridPos>,
    pub status: RegionStatus,
}

/// Row-major enumeration of the grid positions inside the attention region.
pub fn grid_positions(geom: GridGeometry, region: &AttentionRegion) -> GridPositions {
    let Some(b) = grid_bounds(geom, region) else {
        return GridPositions {
            positions: Vec::new(),
            status: RegionStatus::Empty,
        };
    };
    let positions = (b.gy_min..=b.gy_max)
        .flat_map(|gy| (b.gx_min..=b.gx_max).map(move |gx| GridPos { gx, gy }))
        .collect();
    GridPositions {
        positions,
        status: RegionStatus::Ok,
    }
}

/// Attention indicator for a single grid position.
pub fn indicator(pos: GridPos, geom: GridGeometry, region: &AttentionRegion) -> bool {
    grid_bounds(geom, region).is_some_and(|b| b.contains(pos))
}

/// `(w, h)` for every (area, ratio) pair, areas outermost.
pub fn anchor_shapes(spec: &AnchorSpec) -> Vec<(f64, f64)> {
    spec.areas
        .iter()
        .flat_map(|&area| {
            spec.ratios
                .iter()
                .map(move |&ratio| ((area * ratio).sqrt(), (area / ratio).sqrt()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorRecord {
    pub bbox: BBox,
    pub position: GridPos,
    pub shape_index: usize,
    /// The anchor extends past the image bounds.
    pub cross_boundary: bool,
}

/// Pixel-space center of a grid cell.
pub fn cell_center(pos: GridPos, stride: usize) -> (f64, f64) {
    let s = stride as f64;
    ((pos.gx as f64 + 0.5) * s, (pos.gy as f64 + 0.5) * s)
}

/// Anchors for each position of `positions`, `k` per position in shape order.
pub fn anchors_at(
    positions: &[GridPos],
    spec: &AnchorSpec,
    image_w: f64,
    image_h: f64,
) -> Vec<AnchorRecord> {
    let shapes = anchor_shapes(spec);
    let mut out = Vec::with_capacity(positions.len() * shapes.len());
    for &position in positions {
        let (cx, cy) = cell_center(position, spec.stride);
        for (shape_index, &(w, h)) in shapes.iter().enumerate() {
            let bbox = BBox {
                x: cx - 0.5 * w,
                y: cy - 0.5 * h,
                w,
                h,
            };
            out.push(AnchorRecord {
                bbox,
                position,
                shape_index,
                cross_boundary: !bbox.inside(image_w, image_h),
            });
        }
    }
    out
}

pub fn generate_anchors(
    geom: GridGeometry,
    region: &AttentionRegion,
    spec: &AnchorSpec,
    image_w: f64,
    image_h: f64,
) -> Vec<AnchorRecord> {
    anchors_at(&grid_positions(geom, region).positions, spec, image_w, image_h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionStats {
    pub positions_full: usize,
    pub positions_restricted: usize,
    pub anchors_full: usize,
    pub anchors_restricted: usize,
    /// `1 - positions_restricted / positions_full`
    pub position_reduction: f64,
    /// `1 - anchors_restricted / anchors_full`
    pub anchor_reduction: f64,
}

/// Compare `region` with `spec_restricted` against the full grid with `spec_full`.
pub fn reduction_stats(
    geom: GridGeometry,
    region: &AttentionRegion,
    spec_restricted: &AnchorSpec,
    spec_full: &AnchorSpec,
) -> ReductionStats {
    let positions_full = geom.cells();
    let positions_restricted = grid_bounds(geom, region).map_or(0, |b| b.count());
    let anchors_full = positions_full * spec_full.k();
    let anchors_restricted = positions_restricted * spec_restricted.k();
    ReductionStats {
        positions_full,
        positions_restricted,
        anchors_full,
        anchors_restricted,
        position_reduction: 1.0 - positions_restricted as f64 / positions_full as f64,
        anchor_reduction: 1.0 - anchors_restricted as f64 / anchors_full as f64,
    }
}
