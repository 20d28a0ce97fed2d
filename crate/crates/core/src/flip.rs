//! Horizontal-flip geometry for the consistency objective.

use serde::{Deserialize, Serialize};

use crate::grid::{center_of, project_to_grid, BBox, GeometryError, GridConfig, GridIndex};
use crate::map::{FieldMap, ImageTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipPair {
    pub original_image: ImageTensor,
    pub original_annotations: Vec<BBox>,
    pub flipped_image: ImageTensor,
    pub flipped_annotations: Vec<BBox>,
    /// `(p, p')`: center cell of each object in the original image and the
    /// center cell of its mirror, each projected from its own annotation.
    pub center_pairs: Vec<(GridIndex, GridIndex)>,
}

pub fn flip_image(image: &ImageTensor) -> ImageTensor {
    image.mirrored()
}

pub fn flip_annotations(boxes: &[BBox], image_width: usize) -> Vec<BBox> {
    boxes.iter().map(|b| b.flipped(image_width as f64)).collect()
}

/// Mirror an image with its boxes and pair up the grid centers.
///
/// The mirrored center cell is projected from the flipped box rather than
/// obtained by mirroring the original cell index, so floor quantization can
/// never put the pair one cell apart.
pub fn flip_sample(image: &ImageTensor, boxes: &[BBox], grid: &GridConfig) -> Result<FlipPair, GeometryError> {
    let flipped_annotations = flip_annotations(boxes, image.width);
    let center_pairs = boxes
        .iter()
        .zip(&flipped_annotations)
        .map(|(a, b)| Ok((project_to_grid(center_of(a), grid)?.0, project_to_grid(center_of(b), grid)?.0)))
        .collect::<Result<Vec<_>, GeometryError>>()?;
    Ok(FlipPair {
        original_image: image.clone(),
        original_annotations: boxes.to_vec(),
        flipped_image: flip_image(image),
        flipped_annotations,
        center_pairs,
    })
}

/// Bring a heatmap predicted on the mirrored image back to the original
/// orientation. Class channels are untouched.
pub fn flip_back_heatmap(heatmap: &FieldMap) -> FieldMap {
    heatmap.mirrored()
}

/// Mirror offset and size fields predicted on the flipped image and negate
/// the horizontal offset channel. Vertical offset and both size channels
/// keep their sign.
pub fn flip_back_regression(offsets: &FieldMap, sizes: &FieldMap) -> (FieldMap, FieldMap) {
    flip_back_regression_about(offsets, sizes, 0.0)
}

/// As [`flip_back_regression`], reflecting the horizontal offset about
/// `pivot` (`o ↦ 2·pivot - o`) instead of about zero.
pub fn flip_back_regression_about(offsets: &FieldMap, sizes: &FieldMap, pivot: f64) -> (FieldMap, FieldMap) {
    let mut off = offsets.mirrored();
    let plane = off.height * off.width;
    off.data[..plane].iter_mut().for_each(|v| *v = 2.0 * pivot - *v);
    (off, sizes.mirrored())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(w: usize) -> ImageTensor {
        FieldMap::from_vec(3, 2, w, (0..3 * 2 * w).map(|v| v as f64 / 100.0).collect()).unwrap()
    }

    #[test]
    fn box_flip_examples() {
        let b = BBox::new(0.0, 0.0, 8.0, 8.0, 0).unwrap();
        let f = b.flipped(16.0);
        assert_eq!((f.x1, f.y1, f.x2, f.y2), (8.0, 0.0, 16.0, 8.0));
        let centered = BBox::new(4.0, 1.0, 12.0, 5.0, 1).unwrap();
        assert_eq!(centered.flipped(16.0), centered);
    }

    #[test]
    fn flip_sample_is_an_involution() {
        let grid = GridConfig::new(16, 16, 4, 2).unwrap();
        let img = FieldMap::from_vec(3, 16, 16, (0..768).map(|v| v as f64 / 768.0).collect()).unwrap();
        let boxes = vec![BBox::new(1.0, 2.0, 7.0, 9.0, 0).unwrap(), BBox::new(9.0, 3.0, 15.0, 12.0, 1).unwrap()];
        let pair = flip_sample(&img, &boxes, &grid).unwrap();
        assert_eq!(pair.center_pairs.len(), 2);
        for j in 0..16 {
            assert_eq!(pair.flipped_image.get(1, 3, j), img.get(1, 3, 15 - j));
        }
        let back = flip_sample(&pair.flipped_image, &pair.flipped_annotations, &grid).unwrap();
        assert_eq!(back.flipped_image, img);
        assert_eq!(back.flipped_annotations, boxes);
    }

    #[test]
    fn half_cell_centers_mirror_exactly() {
        let grid = GridConfig::new(16, 16, 4, 2).unwrap();
        // center x = 6 → cell 1, offset 0.5
        let boxes = vec![BBox::new(2.0, 2.0, 10.0, 10.0, 0).unwrap()];
        let pair = flip_sample(&image(16), &boxes, &grid).unwrap();
        let (p, q) = pair.center_pairs[0];
        assert_eq!(q.j, grid.grid_width() - 1 - p.j);
        assert_eq!(q.i, p.i);
    }

    #[test]
    fn integral_centers_use_the_flipped_projection() {
        let grid = GridConfig::new(16, 16, 4, 2).unwrap();
        // center x = 4: cell 1 in the original, x' = 12 → cell 3 (naive mirror would say 2)
        let boxes = vec![BBox::new(0.0, 0.0, 8.0, 8.0, 0).unwrap()];
        let pair = flip_sample(&image(16), &boxes, &grid).unwrap();
        assert_eq!(pair.center_pairs[0], (GridIndex::new(1, 1), GridIndex::new(1, 3)));
    }

    #[test]
    fn heatmap_flip_back() {
        let mut h = FieldMap::zeros(2, 3, 4);
        h.set(1, 2, 0, 1.0);
        let f = flip_back_heatmap(&h);
        assert_eq!(f.get(1, 2, 3), 1.0);
        assert_eq!(f.data.iter().sum::<f64>(), 1.0);
        assert_eq!(flip_back_heatmap(&f), h);
        let sym = FieldMap::from_vec(1, 1, 3, vec![0.2, 0.9, 0.2]).unwrap();
        assert_eq!(flip_back_heatmap(&sym), sym);
    }

    #[test]
    fn regression_flip_back_negates_only_horizontal_offset() {
        let mut off = FieldMap::zeros(2, 1, 3);
        let mut size = FieldMap::zeros(2, 1, 3);
        off.set(0, 0, 2, 0.3);
        off.set(1, 0, 2, 0.7);
        size.set(0, 0, 2, 8.0);
        size.set(1, 0, 2, 6.0);
        let (o, s) = flip_back_regression(&off, &size);
        assert_eq!(o.get(0, 0, 0), -0.3);
        assert_eq!(o.get(1, 0, 0), 0.7);
        assert_eq!((s.get(0, 0, 0), s.get(1, 0, 0)), (8.0, 6.0));
        let (o2, s2) = flip_back_regression(&o, &s);
        assert_eq!((o2, s2), (off, size));
    }
}
