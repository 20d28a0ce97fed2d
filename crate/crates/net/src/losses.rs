//! Training objectives recorded on a [`Tape`].
//!
//! Each forward value is computed by the reference function in
//! `maskdet_core::loss` (so tape and reference agree bit for bit); the
//! gradient rule is written out by hand.

use maskdet_core::grid::GridIndex;
use maskdet_core::loss::{self, clamp_prob, ConsistencyMode, RegressionMode, PROB_EPS};
use maskdet_core::map::{FieldMap, Mask};
use maskdet_core::triplet::{triplet_term, TripletRegions};

use crate::tape::{Function, Tape, Var};

fn in_clamp_range(p: f64) -> bool {
    (PROB_EPS..=1.0 - PROB_EPS).contains(&p)
}

fn dims(tape: &Tape, v: Var) -> (usize, usize, usize) {
    let [c, h, w] = tape.shape(v);
    (c, h, w)
}

struct Focal {
    target: Vec<f64>,
    n: f64,
    alpha: f64,
    beta: f64,
}

impl Function for Focal {
    fn backward(&self, inputs: &[&[f64]], _: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (self.alpha, self.beta);
        let d = inputs[0]
            .iter()
            .zip(&self.target)
            .map(|(&p, &y)| {
                if !in_clamp_range(p) {
                    return 0.0;
                }
                let dl = if y == 1.0 {
                    -a * (1.0 - p).powf(a - 1.0) * p.ln() + (1.0 - p).powf(a) / p
                } else {
                    (1.0 - y).powf(b) * (a * p.powf(a - 1.0) * (1.0 - p).ln() - p.powf(a) / (1.0 - p))
                };
                -grad[0] * dl / self.n
            })
            .collect();
        vec![Some(d)]
    }
}

/// Penalty-focal loss of the heatmap `pred` against `target`.
pub fn focal(tape: &mut Tape, pred: Var, target: &FieldMap, n: usize, alpha: f64, beta: f64) -> Var {
    let value = loss::focal_pixel_loss(&tape.to_map(pred), target, n, alpha, beta).expect("focal: shape mismatch");
    let f = Focal { target: target.data.clone(), n: n.max(1) as f64, alpha, beta };
    tape.custom(&[pred], [1, 1, 1], vec![value], Box::new(f))
}

struct Regression {
    /// Flat index into the field and its target value.
    entries: Vec<(usize, f64)>,
    n: f64,
    mode: RegressionMode,
    smooth_beta: f64,
}

impl Function for Regression {
    fn backward(&self, inputs: &[&[f64]], _: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let field = inputs[0];
        let mut d = vec![0.0; field.len()];
        for &(at, target) in &self.entries {
            let diff = field[at] - target;
            let slope = match self.mode {
                RegressionMode::SmoothL1 if diff.abs() < self.smooth_beta => diff / self.smooth_beta,
                _ if diff == 0.0 => 0.0,
                _ => diff.signum(),
            };
            d[at] += grad[0] * slope / self.n;
        }
        vec![Some(d)]
    }
}

/// Offset or size regression at the listed centers of a 2-channel field.
pub fn regression(tape: &mut Tape, field: Var, targets: &[(GridIndex, [f64; 2])], n: usize, mode: RegressionMode, smooth_beta: f64) -> Var {
    let map = tape.to_map(field);
    let value = loss::regression_loss_with(&map, targets, n, mode, smooth_beta).expect("regression: bad field or target cell");
    let entries = targets
        .iter()
        .flat_map(|&(cell, gt)| (0..2).map(move |k| (k, cell, gt[k])))
        .map(|(k, cell, g)| (map.index(k, cell.i, cell.j), g))
        .collect();
    let f = Regression { entries, n: n.max(1) as f64, mode, smooth_beta };
    tape.custom(&[field], [1, 1, 1], vec![value], Box::new(f))
}

struct Hinge;

impl Function for Hinge {
    fn backward(&self, inputs: &[&[f64]], out: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        if out[0] <= 0.0 {
            return vec![None, None, None];
        }
        let (a, p, n) = (inputs[0], inputs[1], inputs[2]);
        let g = grad[0];
        let da = p.iter().zip(n).map(|(p, n)| 2.0 * g * (n - p)).collect();
        let dp = a.iter().zip(p).map(|(a, p)| -2.0 * g * (a - p)).collect();
        let dn = a.iter().zip(n).map(|(a, n)| 2.0 * g * (a - n)).collect();
        vec![Some(da), Some(dp), Some(dn)]
    }
}

/// One hinge term over three unit embeddings of shape `[d,1,1]`.
pub fn triplet_hinge(tape: &mut Tape, a: Var, p: Var, n: Var, margin: f64) -> Var {
    let value = triplet_term(tape.value(a), tape.value(p), tape.value(n), margin);
    tape.custom(&[a, p, n], [1, 1, 1], vec![value], Box::new(Hinge))
}

/// Sum of triplet hinges over regions of the embedding field; each region
/// is average-pooled and scaled to unit length.
pub fn triplet(tape: &mut Tape, embeddings: Var, plan: &[TripletRegions], margin: f64) -> Var {
    let mut terms = Vec::with_capacity(plan.len());
    for t in plan {
        let [a, p, n] = [t.anchor, t.positive, t.negative].map(|rect| {
            let m = tape.region_mean(embeddings, rect);
            tape.normalize_channels(m)
        });
        terms.push((triplet_hinge(tape, a, p, n, margin), 1.0));
    }
    tape.weighted_sum(&terms)
}

struct ConsistencyCls {
    /// Flat indices of every (class, masked cell).
    entries: Vec<usize>,
    mode: ConsistencyMode,
    divisor: f64,
}

impl Function for ConsistencyCls {
    fn backward(&self, inputs: &[&[f64]], _: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let mut da = vec![0.0; a.len()];
        let mut db = vec![0.0; b.len()];
        let g = grad[0] / self.divisor;
        for &at in &self.entries {
            let (x, y) = (a[at], b[at]);
            match self.mode {
                ConsistencyMode::MaskedL2 => {
                    da[at] += 2.0 * g * (x - y);
                    db[at] -= 2.0 * g * (x - y);
                }
                ConsistencyMode::BernoulliJsd => {
                    let (p, q) = (clamp_prob(x), clamp_prob(y));
                    let m = 0.5 * (p + q);
                    // ∂JSD/∂p = ½·log(p(1-m) / ((1-p)m)), symmetric in q
                    if in_clamp_range(x) {
                        da[at] += g * 0.5 * (p * (1.0 - m) / ((1.0 - p) * m)).ln();
                    }
                    if in_clamp_range(y) {
                        db[at] += g * 0.5 * (q * (1.0 - m) / ((1.0 - q) * m)).ln();
                    }
                }
            }
        }
        vec![Some(da), Some(db)]
    }
}

/// Classification consistency between `pred` and an already flipped-back
/// heatmap over the foreground `mask`.
pub fn consistency_cls(tape: &mut Tape, pred: Var, flipped_back: Var, mask: &Mask, mode: ConsistencyMode) -> Var {
    let a = tape.to_map(pred);
    let value = loss::consistency_cls_loss(&a, &tape.to_map(flipped_back), mask, mode).expect("consistency: shape mismatch");
    let (c, _, _) = dims(tape, pred);
    let entries: Vec<usize> = mask.cells().flat_map(|cell| (0..c).map(move |k| (k, cell))).map(|(k, cell)| a.index(k, cell.i, cell.j)).collect();
    let divisor = match mode {
        ConsistencyMode::MaskedL2 => mask.count(),
        ConsistencyMode::BernoulliJsd => mask.count() * c,
    }
    .max(1) as f64;
    tape.custom(&[pred, flipped_back], [1, 1, 1], vec![value], Box::new(ConsistencyCls { entries, mode, divisor }))
}

struct ConsistencyLoc {
    /// Flat plane indices `(p, p')` per pair.
    pairs: Vec<(usize, usize)>,
    plane: usize,
    pivot: f64,
}

impl Function for ConsistencyLoc {
    fn backward(&self, inputs: &[&[f64]], _: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let [off, size, off_f, size_f] = [inputs[0], inputs[1], inputs[2], inputs[3]];
        let mut d: Vec<Vec<f64>> = inputs.iter().map(|v| vec![0.0; v.len()]).collect();
        let g = 2.0 * grad[0] / self.pairs.len() as f64;
        let s = self.plane;
        for &(p, q) in &self.pairs {
            let dx = off[p] + off_f[q] - 2.0 * self.pivot;
            d[0][p] += g * dx;
            d[2][q] += g * dx;
            let dy = off[s + p] - off_f[s + q];
            d[0][s + p] += g * dy;
            d[2][s + q] -= g * dy;
            for k in 0..2 {
                let ds = size[k * s + p] - size_f[k * s + q];
                d[1][k * s + p] += g * ds;
                d[3][k * s + q] -= g * ds;
            }
        }
        d.into_iter().map(Some).collect()
    }
}

/// Localization consistency at matched centers; `off_flip`/`size_flip` are
/// the raw fields predicted on the mirrored image, horizontal offsets are
/// mirrored about `pivot`.
pub fn consistency_loc(tape: &mut Tape, off: Var, size: Var, off_flip: Var, size_flip: Var, pairs: &[(GridIndex, GridIndex)], pivot: f64) -> Var {
    let maps = [off, size, off_flip, size_flip].map(|v| tape.to_map(v));
    let value = loss::consistency_loc_loss_with(&maps[0], &maps[1], &maps[2], &maps[3], pairs, pivot).expect("consistency: bad field or pair");
    let w = maps[0].width;
    let flat = pairs.iter().map(|(p, q)| (p.i * w + p.j, q.i * w + q.j)).collect();
    let f = ConsistencyLoc { pairs: flat, plane: maps[0].height * w, pivot };
    tape.custom(&[off, size, off_flip, size_flip], [1, 1, 1], vec![value], Box::new(f))
}
