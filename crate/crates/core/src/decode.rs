//! Keypoint decoding: heatmap peaks plus offset and size fields become
//! scored boxes. There is no box-level suppression; a cell is a detection
//! only when it is the maximum of its own neighborhood.

use serde::{Deserialize, Serialize};

use crate::grid::{BBox, GridConfig, GridIndex};
use crate::map::{FieldMap, ShapeError};
use crate::target::TargetPack;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub top_k: usize,
    /// Side of the square neighborhood used for peak tests; odd.
    pub peak_window: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { score_threshold: 0.3, top_k: 100, peak_window: 3 }
    }
}

/// Network outputs for one image, all at the stride grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionPack {
    /// Per-class probabilities.
    pub heatmap: FieldMap,
    /// `(dx, dy)` sub-cell offsets.
    pub offsets: FieldMap,
    /// `(width, height)` in pixels.
    pub sizes: FieldMap,
    /// Unit-norm embedding per cell; may have zero channels.
    pub embeddings: FieldMap,
}

impl PredictionPack {
    /// The prediction a perfect model would make: the target heatmap with
    /// exact offsets and sizes written at every object center.
    pub fn ideal(targets: &TargetPack) -> PredictionPack {
        let (h, w) = (targets.heatmap.height, targets.heatmap.width);
        let mut offsets = FieldMap::zeros(2, h, w);
        let mut sizes = FieldMap::zeros(2, h, w);
        for o in &targets.objects {
            for k in 0..2 {
                offsets.set(k, o.cell.i, o.cell.j, o.offset[k]);
                sizes.set(k, o.cell.i, o.cell.j, o.size[k]);
            }
        }
        PredictionPack { heatmap: targets.heatmap.clone(), offsets, sizes, embeddings: FieldMap::zeros(0, h, w) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub cell: GridIndex,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// Cells equal to the maximum of their `peak_window` neighborhood in the same
/// class channel, scoring at least the threshold, best `top_k` first. Ties
/// are ordered by `(class, i, j)`.
pub fn peak_extract(heatmap: &FieldMap, cfg: &DecodeConfig) -> Vec<Peak> {
    let r = (cfg.peak_window / 2) as isize;
    let (h, w) = (heatmap.height as isize, heatmap.width as isize);
    let mut peaks = Vec::new();
    for k in 0..heatmap.channels {
        for i in 0..h {
            for j in 0..w {
                let v = heatmap.get(k, i as usize, j as usize);
                if v < cfg.score_threshold {
                    continue;
                }
                let mut is_peak = true;
                'window: for ii in (i - r).max(0)..=(i + r).min(h - 1) {
                    for jj in (j - r).max(0)..=(j + r).min(w - 1) {
                        if heatmap.get(k, ii as usize, jj as usize) > v {
                            is_peak = false;
                            break 'window;
                        }
                    }
                }
                if is_peak {
                    peaks.push(Peak { cell: GridIndex::new(i as usize, j as usize), class_id: k, score: v });
                }
            }
        }
    }
    // Cells were pushed in (class, i, j) order, so a stable sort keeps ties ordered.
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score));
    peaks.truncate(cfg.top_k);
    peaks
}

/// Turn predictions into boxes in image pixels, clamped to the image.
/// Peaks whose box collapses after clamping are dropped.
pub fn decode(pred: &PredictionPack, cfg: &DecodeConfig, grid: &GridConfig) -> Result<Vec<Detection>, ShapeError> {
    let plane = (grid.grid_height(), grid.grid_width());
    pred.heatmap.expect_shape("heatmap", (grid.num_classes, plane.0, plane.1))?;
    pred.offsets.expect_shape("offset field", (2, plane.0, plane.1))?;
    pred.sizes.expect_shape("size field", (2, plane.0, plane.1))?;
    let s = grid.stride as f64;
    let detections = peak_extract(&pred.heatmap, cfg)
        .into_iter()
        .filter_map(|p| {
            let (i, j) = (p.cell.i, p.cell.j);
            let cx = (j as f64 + pred.offsets.get(0, i, j)) * s;
            let cy = (i as f64 + pred.offsets.get(1, i, j)) * s;
            let (bw, bh) = (pred.sizes.get(0, i, j), pred.sizes.get(1, i, j));
            let raw = BBox { x1: cx - bw / 2.0, y1: cy - bh / 2.0, x2: cx + bw / 2.0, y2: cy + bh / 2.0, class_id: p.class_id };
            raw.clamp_to(grid.width as f64, grid.height as f64).map(|bbox| Detection { bbox, score: p.score })
        })
        .collect();
    Ok(detections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target::encode_targets;
    use proptest::prelude::*;

    /// Direct scan: a cell qualifies iff no neighbor within the window is
    /// larger; output sorted by (-score, class, i, j).
    fn brute_force_peaks(h: &FieldMap, cfg: &DecodeConfig) -> Vec<(usize, usize, usize)> {
        let r = (cfg.peak_window / 2) as i64;
        let mut out = vec![];
        for k in 0..h.channels {
            for i in 0..h.height as i64 {
                for j in 0..h.width as i64 {
                    let v = h.get(k, i as usize, j as usize);
                    let mut ok = v >= cfg.score_threshold;
                    for di in -r..=r {
                        for dj in -r..=r {
                            let (a, b) = (i + di, j + dj);
                            if a >= 0 && b >= 0 && a < h.height as i64 && b < h.width as i64 && h.get(k, a as usize, b as usize) > v {
                                ok = false;
                            }
                        }
                    }
                    if ok {
                        out.push((k, i as usize, j as usize, v));
                    }
                }
            }
        }
        out.sort_by(|a, b| b.3.total_cmp(&a.3).then((a.0, a.1, a.2).cmp(&(b.0, b.1, b.2))));
        out.truncate(cfg.top_k);
        out.into_iter().map(|(k, i, j, _)| (k, i, j)).collect()
    }

    #[test]
    fn empty_and_single_peak() {
        let cfg = DecodeConfig::default();
        assert!(peak_extract(&FieldMap::zeros(2, 4, 4), &cfg).is_empty());
        let mut h = FieldMap::zeros(2, 4, 4);
        h.set(1, 2, 3, 1.0);
        let p = peak_extract(&h, &cfg);
        assert_eq!(p, vec![Peak { cell: GridIndex::new(2, 3), class_id: 1, score: 1.0 }]);
    }

    #[test]
    fn plateau_cells_all_qualify_in_lexicographic_order() {
        let mut h = FieldMap::zeros(1, 4, 4);
        for (i, j) in [(1, 1), (1, 2), (2, 1)] {
            h.set(0, i, j, 0.8);
        }
        let cfg = DecodeConfig::default();
        let got: Vec<_> = peak_extract(&h, &cfg).iter().map(|p| (p.class_id, p.cell.i, p.cell.j)).collect();
        assert_eq!(got, vec![(0, 1, 1), (0, 1, 2), (0, 2, 1)]);
        assert_eq!(got, brute_force_peaks(&h, &cfg));
    }

    #[test]
    fn below_threshold_gives_nothing() {
        let mut h = FieldMap::zeros(2, 4, 4);
        h.set(0, 1, 1, 0.29);
        let grid = GridConfig::new(16, 16, 4, 2).unwrap();
        let pred = PredictionPack { heatmap: h, offsets: FieldMap::zeros(2, 4, 4), sizes: FieldMap::filled(2, 4, 4, 4.0), embeddings: FieldMap::zeros(0, 4, 4) };
        assert!(decode(&pred, &DecodeConfig::default(), &grid).unwrap().is_empty());
    }

    #[test]
    fn decode_rejects_mismatched_fields() {
        let grid = GridConfig::new(16, 16, 4, 2).unwrap();
        let pred = PredictionPack {
            heatmap: FieldMap::zeros(2, 4, 4),
            offsets: FieldMap::zeros(2, 3, 4),
            sizes: FieldMap::zeros(2, 4, 4),
            embeddings: FieldMap::zeros(0, 4, 4),
        };
        assert!(decode(&pred, &DecodeConfig::default(), &grid).is_err());
    }

    #[test]
    fn ideal_predictions_round_trip() {
        let grid = GridConfig::new(64, 64, 4, 2).unwrap();
        let anns = vec![BBox::new(3.0, 5.0, 17.5, 21.0, 0).unwrap(), BBox::new(33.0, 30.0, 50.0, 52.25, 1).unwrap()];
        let t = encode_targets(&anns, &grid).unwrap();
        let dets = decode(&PredictionPack::ideal(&t), &DecodeConfig::default(), &grid).unwrap();
        assert_eq!(dets.len(), 2);
        for a in &anns {
            let d = dets.iter().find(|d| d.bbox.class_id == a.class_id).unwrap();
            for (x, y) in [(d.bbox.x1, a.x1), (d.bbox.y1, a.y1), (d.bbox.x2, a.x2), (d.bbox.y2, a.y2)] {
                assert!((x - y).abs() < 1e-9);
            }
            assert_eq!(d.score, 1.0);
        }
    }

    proptest! {
        #[test]
        fn peaks_match_brute_force(vals in proptest::collection::vec(0u8..4, 2 * 5 * 6), window in prop_oneof![Just(1usize), Just(3), Just(5)], top_k in 1usize..20) {
            let h = FieldMap::from_vec(2, 5, 6, vals.iter().map(|&v| v as f64 / 3.0).collect()).unwrap();
            let cfg = DecodeConfig { score_threshold: 0.3, top_k, peak_window: window };
            let got: Vec<_> = peak_extract(&h, &cfg).iter().map(|p| (p.class_id, p.cell.i, p.cell.j)).collect();
            prop_assert_eq!(got, brute_force_peaks(&h, &cfg));
        }
    }
}
