//! Forward evaluation of every training objective.
//!
//! These are the reference implementations: the autodiff versions in
//! `maskdet-net` must agree with them in value, and their gradients are
//! checked by central differences taken through these functions.

use serde::{Deserialize, Serialize};

use crate::grid::GridIndex;
use crate::map::{FieldMap, Mask, ShapeError};

/// Predicted probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before
/// any logarithm is taken.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionMode {
    L1,
    SmoothL1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    /// Squared difference over masked cells and classes.
    MaskedL2,
    /// Per-class Bernoulli Jensen–Shannon divergence over masked cells.
    BernoulliJsd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pix: f64,
    pub lambda_off: f64,
    pub lambda_s: f64,
    pub lambda_tri: f64,
    pub lambda_con: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Triplet margin.
    pub margin: f64,
    pub regression: RegressionMode,
    /// Boundary between the quadratic and linear zones of smooth L1.
    pub smooth_l1_beta: f64,
    pub consistency: ConsistencyMode,
    /// Value the horizontal offset is mirrored about when comparing a
    /// prediction with its flipped counterpart. `0` compares `Ô₁` with `-Ô'₁`;
    /// `0.5` matches offsets measured from the cell corner, where mirroring
    /// maps `o` to `1 - o`.
    pub flip_offset_pivot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pix: 1.0,
            lambda_off: 1.0,
            lambda_s: 0.01,
            lambda_tri: 1.0,
            lambda_con: 100.0,
            alpha: 2.0,
            beta: 4.0,
            margin: 0.3,
            regression: RegressionMode::L1,
            smooth_l1_beta: 1.0,
            consistency: ConsistencyMode::MaskedL2,
            flip_offset_pivot: 0.5,
        }
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Penalty-focal loss over a predicted heatmap, normalized by `max(n, 1)`.
///
/// Cells whose target is exactly 1 use `(1-ŷ)^α·log ŷ`; all others use
/// `(1-y)^β·ŷ^α·log(1-ŷ)`.
pub fn focal_pixel_loss(pred: &FieldMap, target: &FieldMap, n: usize, alpha: f64, beta: f64) -> Result<f64, ShapeError> {
    pred.expect_shape("focal prediction", target.shape())?;
    let mut total = 0.0;
    for (&p, &y) in pred.data.iter().zip(&target.data) {
        let p = clamp_prob(p);
        total += if y == 1.0 {
            (1.0 - p).powf(alpha) * p.ln()
        } else {
            (1.0 - y).powf(beta) * p.powf(alpha) * (1.0 - p).ln()
        };
    }
    Ok(-total / n.max(1) as f64)
}

#[inline]
pub fn regression_penalty(diff: f64, mode: RegressionMode, smooth_beta: f64) -> f64 {
    let a = diff.abs();
    match mode {
        RegressionMode::L1 => a,
        RegressionMode::SmoothL1 => {
            if a < smooth_beta {
                0.5 * a * a / smooth_beta
            } else {
                a - 0.5 * smooth_beta
            }
        }
    }
}

fn regression_loss(
    field: &FieldMap,
    targets: &[(GridIndex, [f64; 2])],
    n: usize,
    mode: RegressionMode,
    smooth_beta: f64,
) -> Result<f64, ShapeError> {
    if field.channels != 2 {
        return Err(ShapeError::Mismatch {
            what: "regression field",
            expected: (2, field.height, field.width),
            actual: field.shape(),
        });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &(cell, gt) in targets {
        field.check_cell(cell)?;
        for (k, &g) in gt.iter().enumerate() {
            total += regression_penalty(field.get(k, cell.i, cell.j) - g, mode, smooth_beta);
        }
    }
    Ok(total / n as f64)
}

/// Sub-cell offset regression at the object centers.
pub fn offset_loss(
    field: &FieldMap,
    targets: &[(GridIndex, [f64; 2])],
    n: usize,
    mode: RegressionMode,
) -> Result<f64, ShapeError> {
    regression_loss(field, targets, n, mode, 1.0)
}

/// Box size regression (pixels) at the object centers.
pub fn size_loss(
    field: &FieldMap,
    targets: &[(GridIndex, [f64; 2])],
    n: usize,
    mode: RegressionMode,
) -> Result<f64, ShapeError> {
    regression_loss(field, targets, n, mode, 1.0)
}

/// Same as [`offset_loss`]/[`size_loss`] with an explicit smooth-L1 boundary.
pub fn regression_loss_with(
    field: &FieldMap,
    targets: &[(GridIndex, [f64; 2])],
    n: usize,
    mode: RegressionMode,
    smooth_beta: f64,
) -> Result<f64, ShapeError> {
    regression_loss(field, targets, n, mode, smooth_beta)
}

pub fn center_loss(pix: f64, off: f64, size: f64, w: &LossWeights) -> f64 {
    w.lambda_pix * pix + w.lambda_off * off + w.lambda_s * size
}

pub fn total_loss(center: f64, triplet: f64, consistency: f64, w: &LossWeights) -> f64 {
    center + w.lambda_tri * triplet + w.lambda_con * consistency
}

/// `p log(p/m)` with the `0 log 0 = 0` convention.
fn kl_term(p: f64, m: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * (p / m).ln()
    }
}

/// Jensen–Shannon divergence between Bernoulli(p) and Bernoulli(q), in nats.
pub fn bernoulli_jsd(p: f64, q: f64) -> f64 {
    let m = 0.5 * (p + q);
    let kl = |a: f64| kl_term(a, m) + kl_term(1.0 - a, 1.0 - m);
    0.5 * kl(p) + 0.5 * kl(q)
}

/// Classification consistency between a heatmap and the flipped-back heatmap
/// of the mirrored image, restricted to foreground cells.
pub fn consistency_cls_loss(
    pred: &FieldMap,
    pred_flipbacked: &FieldMap,
    mask: &Mask,
    mode: ConsistencyMode,
) -> Result<f64, ShapeError> {
    pred_flipbacked.expect_shape("flipped-back heatmap", pred.shape())?;
    if (mask.height, mask.width) != (pred.height, pred.width) {
        return Err(ShapeError::Mismatch {
            what: "consistency mask",
            expected: (1, pred.height, pred.width),
            actual: (1, mask.height, mask.width),
        });
    }
    let n_mask = mask.count();
    if n_mask == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for cell in mask.cells() {
        for k in 0..pred.channels {
            let a = pred.get(k, cell.i, cell.j);
            let b = pred_flipbacked.get(k, cell.i, cell.j);
            total += match mode {
                ConsistencyMode::MaskedL2 => (a - b) * (a - b),
                ConsistencyMode::BernoulliJsd => bernoulli_jsd(clamp_prob(a), clamp_prob(b)),
            };
        }
    }
    Ok(match mode {
        ConsistencyMode::MaskedL2 => total / n_mask as f64,
        ConsistencyMode::BernoulliJsd => total / (n_mask * pred.channels) as f64,
    })
}

/// Localization consistency at matched centers `(p, p')`.
///
/// `offsets_flip`/`sizes_flip` are the raw predictions on the mirrored image
/// and are read at `p'`. Horizontal offsets are compared after negation.
pub fn consistency_loc_loss(
    offsets: &FieldMap,
    sizes: &FieldMap,
    offsets_flip: &FieldMap,
    sizes_flip: &FieldMap,
    center_pairs: &[(GridIndex, GridIndex)],
) -> Result<f64, ShapeError> {
    consistency_loc_loss_with(offsets, sizes, offsets_flip, sizes_flip, center_pairs, 0.0)
}

/// [`consistency_loc_loss`] with the horizontal offsets mirrored about
/// `pivot`: the horizontal term is `(Ô₁ - pivot) + (Ô'₁ - pivot)`.
pub fn consistency_loc_loss_with(
    offsets: &FieldMap,
    sizes: &FieldMap,
    offsets_flip: &FieldMap,
    sizes_flip: &FieldMap,
    center_pairs: &[(GridIndex, GridIndex)],
    pivot: f64,
) -> Result<f64, ShapeError> {
    let shape = offsets.shape();
    sizes.expect_shape("size field", shape)?;
    offsets_flip.expect_shape("flipped offset field", shape)?;
    sizes_flip.expect_shape("flipped size field", shape)?;
    if center_pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &(p, q) in center_pairs {
        offsets.check_cell(p)?;
        offsets.check_cell(q)?;
        let dx = (offsets.get(0, p.i, p.j) - pivot) + (offsets_flip.get(0, q.i, q.j) - pivot);
        let dy = offsets.get(1, p.i, p.j) - offsets_flip.get(1, q.i, q.j);
        let dw = sizes.get(0, p.i, p.j) - sizes_flip.get(0, q.i, q.j);
        let dh = sizes.get(1, p.i, p.j) - sizes_flip.get(1, q.i, q.j);
        total += dx * dx + dy * dy + dw * dw + dh * dh;
    }
    Ok(total / center_pairs.len() as f64)
}
