//! Boxes, keypoints and the image ↔ stride-grid coordinate arithmetic.
//!
//! Image coordinates have their origin at the top-left corner, x grows to the
//! right and y downward. A box covers `[x1, x2) × [y1, y2)`, so the
//! horizontal mirror of `x` in an image of width `W` is exactly `W - x`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::NUM_CLASSES;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box ({x1}, {y1}, {x2}, {y2}) is degenerate or non-finite")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("class id {0} is not a known class")]
    InvalidClass(usize),
    #[error("keypoint ({px}, {py}) lies outside the {width}x{height} image")]
    OutOfBounds { px: f64, py: f64, width: usize, height: usize },
    #[error("invalid grid configuration: {0}")]
    InvalidGrid(String),
}

/// Axis-aligned, class-labelled box in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: usize,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> Result<Self, GeometryError> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::InvalidBox { x1, y1, x2, y2 });
        }
        if class_id >= NUM_CLASSES {
            return Err(GeometryError::InvalidClass(class_id));
        }
        Ok(Self { x1, y1, x2, y2, class_id })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Clip to `[0, width] × [0, height]`; `None` when nothing is left.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
            self.class_id,
        )
        .ok()
    }

    /// Mirror image of the box in an image of the given width.
    pub fn flipped(&self, image_width: f64) -> BBox {
        BBox { x1: image_width - self.x2, x2: image_width - self.x1, ..*self }
    }

    pub fn is_inside(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

/// Clip every box to the image and drop those that become degenerate.
pub fn clamp_annotations(boxes: &[BBox], width: usize, height: usize) -> Vec<BBox> {
    boxes.iter().filter_map(|b| b.clamp_to(width as f64, height as f64)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub px: f64,
    pub py: f64,
}

/// Cell of the stride grid: `i` is the row (from y), `j` the column (from x).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridIndex {
    pub i: usize,
    pub j: usize,
}

impl GridIndex {
    pub fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub num_classes: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, stride: 4, num_classes: NUM_CLASSES }
    }
}

impl GridConfig {
    pub fn new(height: usize, width: usize, stride: usize, num_classes: usize) -> Result<Self, GeometryError> {
        if stride == 0 {
            return Err(GeometryError::InvalidGrid("stride must be at least 1".into()));
        }
        if height == 0 || width == 0 || height % stride != 0 || width % stride != 0 {
            return Err(GeometryError::InvalidGrid(format!(
                "image {width}x{height} is not a positive multiple of stride {stride}"
            )));
        }
        if num_classes == 0 {
            return Err(GeometryError::InvalidGrid("num_classes must be at least 1".into()));
        }
        Ok(Self { height, width, stride, num_classes })
    }

    pub fn grid_height(&self) -> usize {
        self.height / self.stride
    }

    pub fn grid_width(&self) -> usize {
        self.width / self.stride
    }

    /// Range of grid rows and columns overlapped by a box, as half-open
    /// `(i0, i1, j0, j1)`, clipped to the grid.
    pub fn cell_span(&self, b: &BBox) -> (usize, usize, usize, usize) {
        let s = self.stride as f64;
        let span = |lo: f64, hi: f64, n: usize| {
            let a = (lo / s).floor().max(0.0) as usize;
            let b = ((hi / s).ceil().max(0.0) as usize).min(n);
            (a.min(n), b.max(a.min(n)))
        };
        let (i0, i1) = span(b.y1, b.y2, self.grid_height());
        let (j0, j1) = span(b.x1, b.x2, self.grid_width());
        (i0, i1, j0, j1)
    }
}

/// Midpoint of a box.
pub fn center_of(b: &BBox) -> Keypoint {
    Keypoint { px: (b.x1 + b.x2) / 2.0, py: (b.y1 + b.y2) / 2.0 }
}

/// Cell containing `p` and the fractional residue `(dx, dy)` in `[0, 1)`.
pub fn project_to_grid(p: Keypoint, cfg: &GridConfig) -> Result<(GridIndex, [f64; 2]), GeometryError> {
    let inside = p.px >= 0.0 && p.py >= 0.0 && p.px < cfg.width as f64 && p.py < cfg.height as f64;
    if !inside {
        return Err(GeometryError::OutOfBounds { px: p.px, py: p.py, width: cfg.width, height: cfg.height });
    }
    let s = cfg.stride as f64;
    let (qx, qy) = (p.px / s, p.py / s);
    let (fx, fy) = (qx.floor(), qy.floor());
    let idx = GridIndex { i: fy as usize, j: fx as usize };
    Ok((idx, [qx - fx, qy - fy]))
}

/// Inverse of [`project_to_grid`].
pub fn grid_to_image(idx: GridIndex, offset: [f64; 2], cfg: &GridConfig) -> Keypoint {
    let s = cfg.stride as f64;
    Keypoint { px: (idx.j as f64 + offset[0]) * s, py: (idx.i as f64 + offset[1]) * s }
}
