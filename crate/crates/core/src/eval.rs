//! Greedy detection-to-groundtruth matching and per-class precision/recall.

use serde::{Deserialize, Serialize};

use crate::decode::Detection;
use crate::grid::BBox;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub per_class: Vec<ClassCounts>,
}

impl MatchCounts {
    pub fn new(num_classes: usize) -> Self {
        Self { per_class: vec![ClassCounts::default(); num_classes] }
    }

    /// Add another image's counts.
    pub fn accumulate(&mut self, other: &MatchCounts) {
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
        }
    }
}

/// Match detections of one image to its groundtruth boxes.
///
/// Detections are visited by descending score (stable, so equal scores keep
/// their input order). Each takes the unmatched groundtruth box of its class
/// with the highest IoU; at or above `iou_threshold` it is a true positive,
/// otherwise a false positive. Unmatched groundtruth boxes are false
/// negatives.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_threshold: f64, num_classes: usize) -> MatchCounts {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let mut counts = MatchCounts::new(num_classes);
    for &d in &order {
        let det = &dets[d];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, gt)| !taken[*g] && gt.class_id == det.bbox.class_id)
            .map(|(g, gt)| (g, iou(&det.bbox, gt)))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        let c = &mut counts.per_class[det.bbox.class_id];
        match best {
            Some((g, v)) if v >= iou_threshold => {
                taken[g] = true;
                c.tp += 1;
            }
            _ => c.fp += 1,
        }
    }
    for (g, gt) in gts.iter().enumerate() {
        if !taken[g] {
            counts.per_class[gt.class_id].fn_ += 1;
        }
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
}

impl ClassMetrics {
    pub fn f1(&self) -> f64 {
        let s = self.precision + self.recall;
        if s == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / s
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub classes: Vec<ClassMetrics>,
}

impl EvalReport {
    pub fn mean_f1(&self) -> f64 {
        if self.classes.is_empty() {
            return 0.0;
        }
        self.classes.iter().map(ClassMetrics::f1).sum::<f64>() / self.classes.len() as f64
    }

    pub fn min_precision(&self) -> f64 {
        self.classes.iter().map(|c| c.precision).fold(1.0, f64::min)
    }

    pub fn min_recall(&self) -> f64 {
        self.classes.iter().map(|c| c.recall).fold(1.0, f64::min)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision TP/(TP+FP) and recall TP/(TP+FN) per class, with 0/0 read as 1.
pub fn precision_recall(counts: &MatchCounts, iou_threshold: f64) -> EvalReport {
    let classes = counts
        .per_class
        .iter()
        .map(|c| ClassMetrics {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
        })
        .collect();
    EvalReport { iou_threshold, classes }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64, c: usize) -> BBox {
        BBox::new(x1, y1, x2, y2, c).unwrap()
    }

    fn det(bbox: BBox, score: f64) -> Detection {
        Detection { bbox, score }
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 4.0, 4.0, 0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0, 0)), 0.0);
        assert!((iou(&a, &b(2.0, 0.0, 6.0, 4.0, 0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_detections() {
        let gts = vec![b(0.0, 0.0, 4.0, 4.0, 0), b(10.0, 10.0, 14.0, 16.0, 1)];
        let dets: Vec<_> = gts.iter().map(|g| det(*g, 0.9)).collect();
        let c = match_detections(&dets, &gts, 0.5, 2);
        assert_eq!(c.per_class[0], ClassCounts { tp: 1, fp: 0, fn_: 0 });
        assert_eq!(c.per_class[1], ClassCounts { tp: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn duplicate_detection_is_one_tp_one_fp() {
        let gts = vec![b(0.0, 0.0, 4.0, 4.0, 0)];
        let dets = vec![det(gts[0], 0.9), det(b(0.0, 0.0, 4.0, 3.5, 0), 0.8)];
        let c = match_detections(&dets, &gts, 0.5, 2);
        assert_eq!(c.per_class[0], ClassCounts { tp: 1, fp: 1, fn_: 0 });
    }

    #[test]
    fn wrong_class_is_fp_and_fn() {
        let gts = vec![b(0.0, 0.0, 4.0, 4.0, 0)];
        let dets = vec![det(b(0.0, 0.0, 4.0, 4.0, 1), 0.9)];
        let c = match_detections(&dets, &gts, 0.5, 2);
        assert_eq!(c.per_class[0], ClassCounts { tp: 0, fp: 0, fn_: 1 });
        assert_eq!(c.per_class[1], ClassCounts { tp: 0, fp: 1, fn_: 0 });
    }

    #[test]
    fn higher_score_claims_the_box_first() {
        let gts = vec![b(0.0, 0.0, 4.0, 4.0, 0)];
        let weak = det(b(0.0, 0.0, 4.0, 4.0, 0), 0.4);
        let strong = det(b(0.5, 0.0, 4.0, 4.0, 0), 0.9);
        let c = match_detections(&[weak, strong], &gts, 0.5, 1);
        assert_eq!(c.per_class[0], ClassCounts { tp: 1, fp: 1, fn_: 0 });
    }

    #[test]
    fn precision_recall_examples() {
        let mut counts = MatchCounts::new(2);
        counts.per_class[0] = ClassCounts { tp: 9, fp: 1, fn_: 0 };
        let r = precision_recall(&counts, 0.5);
        assert!((r.classes[0].precision - 0.9).abs() < 1e-15);
        assert_eq!(r.classes[0].recall, 1.0);
        assert_eq!((r.classes[1].precision, r.classes[1].recall), (1.0, 1.0));
    }

    #[test]
    fn count_identities_hold() {
        let gts = vec![b(0.0, 0.0, 4.0, 4.0, 0), b(8.0, 8.0, 12.0, 12.0, 0), b(20.0, 0.0, 24.0, 4.0, 1)];
        let dets = vec![
            det(b(0.0, 0.0, 4.0, 4.0, 0), 0.9),
            det(b(8.5, 8.0, 12.0, 12.0, 0), 0.5),
            det(b(8.0, 8.0, 12.0, 12.0, 0), 0.5),
            det(b(30.0, 30.0, 32.0, 32.0, 1), 0.7),
        ];
        let c = match_detections(&dets, &gts, 0.5, 2);
        for k in 0..2 {
            let n_gt = gts.iter().filter(|g| g.class_id == k).count();
            let n_det = dets.iter().filter(|d| d.bbox.class_id == k).count();
            assert_eq!(c.per_class[k].tp + c.per_class[k].fn_, n_gt);
            assert_eq!(c.per_class[k].tp + c.per_class[k].fp, n_det);
        }
    }
}
