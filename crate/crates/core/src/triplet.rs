//! Online triplet mining over box-pooled embeddings and the margin loss.
//!
//! Mining works in two steps so the differentiable path can reuse it:
//! [`plan_triplets`] picks anchor/positive/negative *regions* of the grid from
//! the annotations alone, and [`pool_region`] turns a region into a unit
//! embedding. [`mine_triplets`] chains both.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BBox, GridConfig};
use crate::map::{FieldMap, Mask};
use crate::target::TargetPack;

/// Largest positional jitter for a re-pooled positive, as a fraction of the
/// box size.
pub const POSITIVE_JITTER: f64 = 0.1;
const BACKGROUND_ATTEMPTS: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TripletError {
    #[error("anchor, positive and negative lists differ in length ({0}, {1}, {2})")]
    LengthMismatch(usize, usize, usize),
    #[error("embedding {index} of the {role} list has norm {norm}, expected 1")]
    NotUnitNorm { role: &'static str, index: usize, norm: f64 },
    #[error("embedding {index} of the {role} list has dimension {dim}, expected {expected}")]
    DimensionMismatch { role: &'static str, index: usize, dim: usize, expected: usize },
}

/// Half-open rectangle of grid cells `[i0, i1) × [j0, j1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellRect {
    pub i0: usize,
    pub i1: usize,
    pub j0: usize,
    pub j1: usize,
}

impl CellRect {
    pub fn of_box(b: &BBox, grid: &GridConfig) -> CellRect {
        let (i0, i1, j0, j1) = grid.cell_span(b);
        CellRect { i0, i1, j0, j1 }
    }

    pub fn area(&self) -> usize {
        (self.i1 - self.i0) * (self.j1 - self.j0)
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.i0..self.i1).flat_map(move |i| (self.j0..self.j1).map(move |j| (i, j)))
    }
}

/// Regions whose pooled embeddings form one triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRegions {
    pub anchor: CellRect,
    pub positive: CellRect,
    pub negative: CellRect,
    pub anchor_class: usize,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TripletBatch {
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

impl TripletBatch {
    /// Build a batch, checking equal lengths, a common dimension and unit norms.
    pub fn new(anchors: Vec<Vec<f64>>, positives: Vec<Vec<f64>>, negatives: Vec<Vec<f64>>) -> Result<Self, TripletError> {
        if anchors.len() != positives.len() || anchors.len() != negatives.len() {
            return Err(TripletError::LengthMismatch(anchors.len(), positives.len(), negatives.len()));
        }
        let dim = anchors.first().map_or(0, Vec::len);
        for (role, list) in [("anchor", &anchors), ("positive", &positives), ("negative", &negatives)] {
            for (index, v) in list.iter().enumerate() {
                if v.len() != dim {
                    return Err(TripletError::DimensionMismatch { role, index, dim: v.len(), expected: dim });
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(TripletError::NotUnitNorm { role, index, norm });
                }
            }
        }
        Ok(Self { anchors, positives, negatives })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One hinge term `max(0, |a-p|² - |a-n|² + margin)`.
pub fn triplet_term(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    (squared_distance(a, p) - squared_distance(a, n) + margin).max(0.0)
}

/// Sum of hinge terms over the batch; 0 for an empty batch.
pub fn triplet_loss(batch: &TripletBatch, margin: f64) -> f64 {
    batch
        .anchors
        .iter()
        .zip(&batch.positives)
        .zip(&batch.negatives)
        .map(|((a, p), n)| triplet_term(a, p, n, margin))
        .sum()
}

/// Mean of the embedding vectors over a region, scaled to unit length.
pub fn pool_region(field: &FieldMap, rect: &CellRect) -> Vec<f64> {
    let mut acc = vec![0.0; field.channels];
    for (i, j) in rect.cells() {
        for (k, a) in acc.iter_mut().enumerate() {
            *a += field.get(k, i, j);
        }
    }
    let count = rect.area().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    acc.iter_mut().for_each(|a| *a /= norm);
    acc
}

fn jittered(b: &BBox, grid: &GridConfig, rng: &mut ChaCha8Rng) -> CellRect {
    let dx = rng.gen_range(-POSITIVE_JITTER..=POSITIVE_JITTER) * b.width();
    let dy = rng.gen_range(-POSITIVE_JITTER..=POSITIVE_JITTER) * b.height();
    let moved = BBox { x1: b.x1 + dx, x2: b.x2 + dx, y1: b.y1 + dy, y2: b.y2 + dy, ..*b };
    let clamped = moved.clamp_to(grid.width as f64, grid.height as f64).unwrap_or(*b);
    CellRect::of_box(&clamped, grid)
}

fn background_region(like: &CellRect, mask: &Mask, rng: &mut ChaCha8Rng) -> Option<CellRect> {
    let (h, w) = (like.i1 - like.i0, like.j1 - like.j0);
    if h <= mask.height && w <= mask.width {
        for _ in 0..BACKGROUND_ATTEMPTS {
            let i0 = rng.gen_range(0..=mask.height - h);
            let j0 = rng.gen_range(0..=mask.width - w);
            let rect = CellRect { i0, i1: i0 + h, j0, j1: j0 + w };
            if rect.cells().all(|(i, j)| !mask.get(i, j)) {
                return Some(rect);
            }
        }
    }
    let free: Vec<_> = mask.data.iter().enumerate().filter(|(_, &b)| !b).map(|(n, _)| n).collect();
    free.choose(rng).map(|&n| {
        let (i, j) = (n / mask.width, n % mask.width);
        CellRect { i0: i, i1: i + 1, j0: j, j1: j + 1 }
    })
}

/// Choose the regions of one triplet per object.
///
/// Positive: another object of the same class when one exists, otherwise a
/// jittered copy of the anchor box. Negative: an object of another class when
/// one exists, otherwise a background patch of the anchor's size taken from
/// cells outside the foreground mask. Objects with no possible negative (no
/// other class and no background cell) are skipped.
pub fn plan_triplets(targets: &TargetPack, seed: u64) -> Vec<TripletRegions> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = &targets.grid;
    let objects = &targets.objects;
    let mut plan = Vec::with_capacity(objects.len());
    for (n, obj) in objects.iter().enumerate() {
        let anchor = CellRect::of_box(&obj.bbox, grid);
        let same: Vec<usize> = (0..objects.len()).filter(|&m| m != n && objects[m].class_id == obj.class_id).collect();
        let other: Vec<usize> = (0..objects.len()).filter(|&m| objects[m].class_id != obj.class_id).collect();
        let positive = match same.choose(&mut rng) {
            Some(&m) => CellRect::of_box(&objects[m].bbox, grid),
            None => jittered(&obj.bbox, grid, &mut rng),
        };
        let negative = match other.choose(&mut rng) {
            Some(&m) => Some(CellRect::of_box(&objects[m].bbox, grid)),
            None => background_region(&anchor, &targets.mask, &mut rng),
        };
        if let Some(negative) = negative {
            plan.push(TripletRegions { anchor, positive, negative, anchor_class: obj.class_id });
        }
    }
    plan
}

/// Mine one triplet per object and pool the embeddings of each region.
pub fn mine_triplets(field: &FieldMap, targets: &TargetPack, seed: u64) -> TripletBatch {
    let mut batch = TripletBatch::default();
    for t in plan_triplets(targets, seed) {
        batch.anchors.push(pool_region(field, &t.anchor));
        batch.positives.push(pool_region(field, &t.positive));
        batch.negatives.push(pool_region(field, &t.negative));
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target::encode_targets;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn satisfied_and_collapsed_triplets() {
        let a = vec![1.0, 0.0];
        let n = vec![0.0, 1.0];
        let b = TripletBatch::new(vec![a.clone()], vec![a.clone()], vec![n]).unwrap();
        assert_eq!(triplet_loss(&b, 0.3), 0.0);
        let b = TripletBatch::new(vec![a.clone()], vec![a.clone()], vec![a]).unwrap();
        assert_eq!(triplet_loss(&b, 0.3), 0.3);
        assert_eq!(triplet_loss(&TripletBatch::default(), 0.3), 0.0);
    }

    #[test]
    fn hand_computed_triplet() {
        // |a-p|² = 2 - 2cos = 0.2 → cos = 0.9; |a-n|² = 0.3 → cos = 0.85
        let a = vec![1.0, 0.0];
        let p = vec![0.9, (1.0f64 - 0.81).sqrt()];
        let n = vec![0.85, -(1.0f64 - 0.7225).sqrt()];
        let b = TripletBatch::new(vec![a], vec![p], vec![n]).unwrap();
        assert!((triplet_loss(&b, 0.3) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn batch_validation() {
        assert!(TripletBatch::new(vec![vec![1.0]], vec![], vec![]).is_err());
        assert!(TripletBatch::new(vec![vec![2.0]], vec![vec![1.0]], vec![vec![1.0]]).is_err());
    }

    fn scene(boxes: &[BBox]) -> TargetPack {
        encode_targets(boxes, &GridConfig::new(32, 32, 4, 2).unwrap()).unwrap()
    }

    /// Field whose embedding at each cell is a distinct unit vector.
    fn field() -> FieldMap {
        let mut f = FieldMap::zeros(3, 8, 8);
        for i in 0..8 {
            for j in 0..8 {
                let v = unit(&[1.0 + i as f64, 1.0 + j as f64, 0.5]);
                for (k, x) in v.iter().enumerate() {
                    f.set(k, i, j, *x);
                }
            }
        }
        f
    }

    #[test]
    fn face_and_mask_scene_uses_each_other_as_negatives() {
        let face = BBox::new(0.0, 0.0, 8.0, 8.0, 0).unwrap();
        let masked = BBox::new(16.0, 16.0, 28.0, 28.0, 1).unwrap();
        let t = scene(&[face, masked]);
        let plan = plan_triplets(&t, 3);
        assert_eq!(plan.len(), 2);
        let g = t.grid;
        assert_eq!(plan[0].anchor, CellRect::of_box(&face, &g));
        assert_eq!(plan[0].negative, CellRect::of_box(&masked, &g));
        assert_eq!(plan[1].anchor, CellRect::of_box(&masked, &g));
        assert_eq!(plan[1].negative, CellRect::of_box(&face, &g));
        let batch = mine_triplets(&field(), &t, 3);
        assert_eq!(batch.len(), 2);
        assert_eq!(batch.negatives[0], pool_region(&field(), &CellRect::of_box(&masked, &g)));
    }

    #[test]
    fn two_faces_use_cross_positives_and_background_negatives() {
        let a = BBox::new(0.0, 0.0, 8.0, 8.0, 0).unwrap();
        let b = BBox::new(20.0, 20.0, 28.0, 28.0, 0).unwrap();
        let t = scene(&[a, b]);
        let plan = plan_triplets(&t, 11);
        assert_eq!(plan.len(), 2);
        assert_eq!(plan[0].positive, CellRect::of_box(&b, &t.grid));
        assert_eq!(plan[1].positive, CellRect::of_box(&a, &t.grid));
        for tr in &plan {
            assert!(tr.negative.cells().all(|(i, j)| !t.mask.get(i, j)));
            assert_eq!(tr.negative.area(), tr.anchor.area());
        }
    }

    #[test]
    fn single_object_positive_is_a_jittered_copy() {
        let a = BBox::new(8.0, 8.0, 20.0, 20.0, 1).unwrap();
        let t = scene(&[a]);
        let anchor = CellRect::of_box(&a, &t.grid);
        for seed in 0..20 {
            let p = plan_triplets(&t, seed)[0].positive;
            assert!(p.i0.abs_diff(anchor.i0) <= 1 && p.j1.abs_diff(anchor.j1) <= 1);
        }
    }

    #[test]
    fn mining_is_deterministic_and_unit_norm() {
        let t = scene(&[BBox::new(0.0, 0.0, 8.0, 8.0, 0).unwrap(), BBox::new(20.0, 4.0, 30.0, 14.0, 0).unwrap()]);
        let a = mine_triplets(&field(), &t, 42);
        assert_eq!(a, mine_triplets(&field(), &t, 42));
        assert!(TripletBatch::new(a.anchors.clone(), a.positives.clone(), a.negatives.clone()).is_ok());
    }

    #[test]
    fn no_objects_gives_empty_batch() {
        assert!(mine_triplets(&field(), &scene(&[]), 0).is_empty());
    }

    proptest! {
        #[test]
        fn triplet_loss_is_rotation_invariant(
            raw in proptest::collection::vec(-1.0f64..1.0, 9),
            theta in 0.0f64..std::f64::consts::TAU,
            margin in 0.0f64..1.0,
        ) {
            prop_assume!(raw.chunks(3).all(|c| c.iter().map(|x| x * x).sum::<f64>() > 1e-3));
            let v: Vec<Vec<f64>> = raw.chunks(3).map(unit).collect();
            let rot = |x: &Vec<f64>| {
                let (s, c) = theta.sin_cos();
                vec![c * x[0] - s * x[1], s * x[0] + c * x[1], -x[2]]
            };
            let b = TripletBatch::new(vec![v[0].clone()], vec![v[1].clone()], vec![v[2].clone()]).unwrap();
            let r = TripletBatch::new(vec![rot(&v[0])], vec![rot(&v[1])], vec![rot(&v[2])]).unwrap();
            let (l, lr) = (triplet_loss(&b, margin), triplet_loss(&r, margin));
            prop_assert!(l >= 0.0);
            prop_assert!((l - lr).abs() < 1e-12);
        }
    }
}
