//! Training targets: Gaussian keypoint heatmap, per-object offset and size
//! regression targets, and the foreground mask used by the consistency loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{center_of, project_to_grid, BBox, GeometryError, GridConfig, GridIndex};
use crate::map::{FieldMap, Mask};

/// Minimum IoU a corner-displaced box must keep with the true box.
pub const DEFAULT_MIN_OVERLAP: f64 = 0.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TargetError {
    #[error("box dimensions must be positive, got {width}x{height}")]
    NonPositiveSize { width: f64, height: f64 },
    #[error("annotation {index} ({bbox:?}) is not inside the image")]
    OutsideImage { index: usize, bbox: BBox },
    #[error("annotation {index} has class {class_id} but the grid has {num_classes} classes")]
    ClassOutOfRange { index: usize, class_id: usize, num_classes: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodeOptions {
    pub min_overlap: f64,
    /// Extra cells added around every box when building the foreground mask.
    pub mask_dilation: usize,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self { min_overlap: DEFAULT_MIN_OVERLAP, mask_dilation: 0 }
    }
}

/// Regression targets of one object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTarget {
    pub cell: GridIndex,
    pub class_id: usize,
    /// Sub-cell residue `(dx, dy)` of the center, in `[0, 1)`.
    pub offset: [f64; 2],
    /// `(width, height)` in image pixels.
    pub size: [f64; 2],
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetPack {
    pub grid: GridConfig,
    pub heatmap: FieldMap,
    pub objects: Vec<ObjectTarget>,
    pub mask: Mask,
    pub n_objects: usize,
}

impl TargetPack {
    pub fn offsets(&self) -> Vec<(GridIndex, [f64; 2])> {
        self.objects.iter().map(|o| (o.cell, o.offset)).collect()
    }

    pub fn sizes(&self) -> Vec<(GridIndex, [f64; 2])> {
        self.objects.iter().map(|o| (o.cell, o.size)).collect()
    }
}

/// Largest corner displacement `r` that keeps IoU ≥ `min_overlap` with the
/// true `width × height` box in the worst of the three displacement patterns:
/// both corners pulled inward, both pushed outward, or the box shifted.
pub fn gaussian_radius(width: f64, height: f64, min_overlap: f64) -> Result<f64, TargetError> {
    if !(width > 0.0 && height > 0.0) {
        return Err(TargetError::NonPositiveSize { width, height });
    }
    let (w, h, o) = (width, height, min_overlap);
    let sum = w + h;
    let area = w * h;

    // (w - 2r)(h - 2r) = o·wh
    let inward = {
        let disc = 4.0 * sum * sum - 16.0 * (1.0 - o) * area;
        (2.0 * sum - disc.max(0.0).sqrt()) / 8.0
    };
    // wh = o·(w + 2r)(h + 2r)
    let outward = {
        let disc = 4.0 * o * o * sum * sum + 16.0 * o * (1.0 - o) * area;
        (-2.0 * o * sum + disc.sqrt()) / (8.0 * o)
    };
    // (w - r)(h - r) / (2wh - (w - r)(h - r)) = o
    let shifted = {
        let k = 2.0 * o * area / (1.0 + o);
        let disc = sum * sum - 4.0 * (area - k);
        (sum - disc.max(0.0).sqrt()) / 2.0
    };
    Ok(inward.min(outward).min(shifted))
}

/// Standard deviation of the keypoint Gaussian for a box of the given size
/// (grid units): one third of the corner-displacement radius.
pub fn gaussian_sigma(box_w: f64, box_h: f64) -> Result<f64, TargetError> {
    gaussian_sigma_with(box_w, box_h, DEFAULT_MIN_OVERLAP)
}

pub fn gaussian_sigma_with(box_w: f64, box_h: f64, min_overlap: f64) -> Result<f64, TargetError> {
    Ok(gaussian_radius(box_w, box_h, min_overlap)? / 3.0)
}

/// Rasterize a Gaussian peak into one class channel, keeping the cellwise
/// maximum with what is already there.
pub fn splat_gaussian(heatmap: &mut FieldMap, center: GridIndex, class_id: usize, sigma: f64) {
    let denom = 2.0 * sigma * sigma;
    for i in 0..heatmap.height {
        let di = i as f64 - center.i as f64;
        for j in 0..heatmap.width {
            let dj = j as f64 - center.j as f64;
            let v = (-(di * di + dj * dj) / denom).exp();
            let idx = heatmap.index(class_id, i, j);
            if v > heatmap.data[idx] {
                heatmap.data[idx] = v;
            }
        }
    }
}

pub fn encode_targets(annotations: &[BBox], cfg: &GridConfig) -> Result<TargetPack, TargetError> {
    encode_targets_with(annotations, cfg, &EncodeOptions::default())
}

pub fn encode_targets_with(
    annotations: &[BBox],
    cfg: &GridConfig,
    opts: &EncodeOptions,
) -> Result<TargetPack, TargetError> {
    let (gh, gw) = (cfg.grid_height(), cfg.grid_width());
    let s = cfg.stride as f64;
    let mut heatmap = FieldMap::zeros(cfg.num_classes, gh, gw);
    let mut mask = Mask::new(gh, gw);
    let mut objects = Vec::with_capacity(annotations.len());

    for (index, b) in annotations.iter().enumerate() {
        if !b.is_inside(cfg.width as f64, cfg.height as f64) {
            return Err(TargetError::OutsideImage { index, bbox: *b });
        }
        if b.class_id >= cfg.num_classes {
            return Err(TargetError::ClassOutOfRange { index, class_id: b.class_id, num_classes: cfg.num_classes });
        }
        let (cell, offset) = project_to_grid(center_of(b), cfg)?;
        let sigma = gaussian_sigma_with(b.width() / s, b.height() / s, opts.min_overlap)?;
        splat_gaussian(&mut heatmap, cell, b.class_id, sigma);

        let (i0, i1, j0, j1) = cfg.cell_span(b);
        let d = opts.mask_dilation;
        for i in i0.saturating_sub(d)..(i1 + d).min(gh) {
            for j in j0.saturating_sub(d)..(j1 + d).min(gw) {
                mask.set(i, j, true);
            }
        }

        objects.push(ObjectTarget { cell, class_id: b.class_id, offset, size: [b.width(), b.height()], bbox: *b });
    }

    Ok(TargetPack { grid: *cfg, heatmap, n_objects: objects.len(), objects, mask })
}
