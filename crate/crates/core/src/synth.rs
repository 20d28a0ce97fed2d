//! Deterministic synthetic scenes of faces and masked faces.
//!
//! A face is a skin-toned ellipse with two eyes and a mouth. A masked face
//! covers the lower half with a rectangle in a mask color. A confuser is an
//! unmasked face whose lower half is hidden by a skin-toned blob (a hand);
//! it keeps the face label, which is what makes it a hard negative for the
//! masked class.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{read_annotations, write_annotations, AnnotationError, AnnotationRecord};
use crate::grid::{center_of, BBox};
use crate::map::{FieldMap, ImageTensor};
use crate::raster::{load_png, quantize, save_png, RasterError};
use crate::{FACE, MASKED_FACE};

const PLACEMENT_ATTEMPTS: usize = 50;

pub const SKIN_TONES: [[f64; 3]; 5] = [
    [0.96, 0.80, 0.69],
    [0.89, 0.67, 0.52],
    [0.76, 0.57, 0.42],
    [0.55, 0.38, 0.26],
    [0.36, 0.24, 0.16],
];

pub const DEFAULT_MASK_PALETTE: [[f64; 3]; 6] = [
    [0.95, 0.95, 0.95],
    [0.55, 0.75, 0.95],
    [0.12, 0.12, 0.14],
    [0.30, 0.70, 0.60],
    [0.95, 0.60, 0.75],
    [0.15, 0.20, 0.45],
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("{path}: {source}")]
    Raster { path: PathBuf, source: RasterError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Face width range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Height / width range.
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub masked_fraction: f64,
    /// Probability that an unmasked face gets a hand-like occluder.
    pub confuser_prob: f64,
    /// Amplitude of the additive uniform pixel noise.
    pub noise: f64,
    /// Grid stride; object centers are kept at least `3 * stride` apart.
    pub stride: usize,
    pub mask_palette: Vec<[f64; 3]>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 4,
            min_size: 12.0,
            max_size: 22.0,
            min_aspect: 1.0,
            max_aspect: 1.25,
            masked_fraction: 0.5,
            confuser_prob: 0.3,
            noise: 0.05,
            stride: 4,
            mask_palette: DEFAULT_MASK_PALETTE.to_vec(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad("size range must be positive and ordered");
        }
        if !(self.min_aspect > 0.0 && self.min_aspect <= self.max_aspect) {
            return bad("aspect range must be positive and ordered");
        }
        if self.max_size > self.width as f64 || self.max_size * self.max_aspect > self.height as f64 {
            return bad("objects do not fit in the image");
        }
        if self.mask_palette.is_empty() {
            return bad("mask palette is empty");
        }
        for p in [self.masked_fraction, self.confuser_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Relative image path used when the dataset is written out.
    pub name: String,
    pub image: ImageTensor,
    pub boxes: Vec<BBox>,
}

/// Everything drawn for one object, independent of whether it is rendered
/// with a confuser, so the confuser probability never shifts placement.
#[derive(Clone, Copy, Debug)]
struct ObjectDraw {
    bbox: BBox,
    skin: [f64; 3],
    mask_color: [f64; 3],
    confused: bool,
    hand: [f64; 3],
    hand_dx: f64,
}

fn uniform_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn place_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<ObjectDraw> {
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let min_sep = 3.0 * spec.stride as f64;
    let mut placed: Vec<ObjectDraw> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut chosen = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = rng.gen_range(spec.min_size..=spec.max_size);
            let h = (w * rng.gen_range(spec.min_aspect..=spec.max_aspect)).min(spec.height as f64);
            let x1 = rng.gen_range(0.0..=spec.width as f64 - w);
            let y1 = rng.gen_range(0.0..=spec.height as f64 - h);
            let candidate = BBox { x1, y1, x2: x1 + w, y2: y1 + h, class_id: FACE };
            let c = center_of(&candidate);
            let clear = placed.iter().all(|o| {
                let d = center_of(&o.bbox);
                let apart = ((c.px - d.px).powi(2) + (c.py - d.py).powi(2)).sqrt() >= min_sep;
                let disjoint = candidate.x2 <= o.bbox.x1 || o.bbox.x2 <= candidate.x1 || candidate.y2 <= o.bbox.y1 || o.bbox.y2 <= candidate.y1;
                apart && disjoint
            });
            if clear {
                chosen = Some(candidate);
                break;
            }
        }
        let masked = rng.gen_bool(spec.masked_fraction);
        let skin = SKIN_TONES[rng.gen_range(0..SKIN_TONES.len())];
        let mask_color = spec.mask_palette[rng.gen_range(0..spec.mask_palette.len())];
        let confuse_draw: f64 = rng.gen();
        let hand = SKIN_TONES[rng.gen_range(0..SKIN_TONES.len())];
        let hand_dx = rng.gen_range(-0.15..=0.15);
        if let Some(mut bbox) = chosen {
            bbox.class_id = if masked { MASKED_FACE } else { FACE };
            let confused = !masked && confuse_draw < spec.confuser_prob;
            placed.push(ObjectDraw { bbox, skin, mask_color, confused, hand, hand_dx });
        }
    }
    placed
}

fn paint(img: &mut FieldMap, x: usize, y: usize, color: [f64; 3]) {
    for (k, c) in color.iter().enumerate() {
        img.set(k, y, x, *c);
    }
}

/// Paint every pixel whose center satisfies `inside`, restricted to a box.
fn fill(img: &mut FieldMap, area: (f64, f64, f64, f64), color: [f64; 3], inside: impl Fn(f64, f64) -> bool) {
    let (x1, y1, x2, y2) = area;
    let xs = (x1.floor().max(0.0) as usize)..(x2.ceil().min(img.width as f64) as usize);
    for y in (y1.floor().max(0.0) as usize)..(y2.ceil().min(img.height as f64) as usize) {
        for x in xs.clone() {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if px >= x1 && px < x2 && py >= y1 && py < y2 && inside(px, py) {
                paint(img, x, y, color);
            }
        }
    }
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> impl Fn(f64, f64) -> bool {
    move |x, y| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
}

fn render_object(img: &mut FieldMap, o: &ObjectDraw) {
    let b = &o.bbox;
    let (w, h) = (b.width(), b.height());
    let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
    fill(img, (b.x1, b.y1, b.x2, b.y2), o.skin, ellipse(cx, cy, w / 2.0, h / 2.0));

    let eye_r = (0.08 * w).max(0.9);
    let eye_y = b.y1 + 0.4 * h;
    for ex in [cx - 0.2 * w, cx + 0.2 * w] {
        fill(img, (ex - eye_r, eye_y - eye_r, ex + eye_r, eye_y + eye_r), [0.08, 0.08, 0.1], ellipse(ex, eye_y, eye_r, eye_r));
    }

    let mouth_y = b.y1 + 0.74 * h;
    fill(img, (cx - 0.17 * w, mouth_y - 0.05 * h, cx + 0.17 * w, mouth_y + 0.05 * h), [0.55, 0.1, 0.12], |_, _| true);

    if o.bbox.class_id == MASKED_FACE {
        fill(img, (b.x1 + 0.08 * w, b.y1 + 0.55 * h, b.x2 - 0.08 * w, b.y1 + 0.92 * h), o.mask_color, |_, _| true);
    } else if o.confused {
        let (hx, hy) = (cx + o.hand_dx * w, b.y1 + 0.75 * h);
        let (rx, ry) = (0.38 * w, 0.2 * h);
        fill(img, (hx - rx, hy - ry, hx + rx, hy + ry), o.hand, ellipse(hx, hy, rx, ry));
    }
}

/// Render scene number `index` of the dataset described by `spec`.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<Sample, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let base = uniform_color(&mut rng);
    let tilt = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
    let mut image = FieldMap::zeros(3, spec.height, spec.width);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let g = tilt[0] * (x as f64 / spec.width as f64 - 0.5) + tilt[1] * (y as f64 / spec.height as f64 - 0.5);
            paint(&mut image, x, y, base.map(|c| c + g));
        }
    }

    let objects = place_objects(spec, &mut rng);
    for o in &objects {
        render_object(&mut image, o);
    }
    for v in image.data.iter_mut() {
        *v += rng.gen_range(-spec.noise..=spec.noise);
    }
    quantize(&mut image);

    Ok(Sample { name: format!("images/{index:06}.png"), image, boxes: objects.iter().map(|o| o.bbox).collect() })
}

pub fn generate_dataset(spec: &SceneSpec, n_images: usize) -> Result<Vec<Sample>, SynthError> {
    if n_images == 0 {
        return Err(SynthError::InvalidSpec("n_images must be at least 1".into()));
    }
    (0..n_images).map(|i| generate_scene(spec, i)).collect()
}

pub const ANNOTATION_FILE: &str = "annotations.jsonl";

/// Write images as PNG files and the annotations as JSONL under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<PathBuf, SynthError> {
    let dir = dir.as_ref();
    for s in samples {
        let path = dir.join(&s.name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| SynthError::Io { path: parent.to_path_buf(), source })?;
        }
        save_png(&s.image, &path).map_err(|source| SynthError::Raster { path: path.clone(), source })?;
    }
    let records: Vec<_> = samples.iter().map(|s| AnnotationRecord { image: s.name.clone(), boxes: s.boxes.clone() }).collect();
    let ann = dir.join(ANNOTATION_FILE);
    write_annotations(&ann, &records)?;
    Ok(ann)
}

/// Load the samples listed in an annotation file; image paths are resolved
/// relative to the file's directory.
pub fn read_dataset(annotation_file: impl AsRef<Path>) -> Result<Vec<Sample>, SynthError> {
    let ann = annotation_file.as_ref();
    let root = ann.parent().unwrap_or(Path::new("."));
    read_annotations(ann)?
        .into_iter()
        .map(|r| {
            let path = root.join(&r.image);
            let image = load_png(&path).map_err(|source| SynthError::Raster { path, source })?;
            Ok(Sample { name: r.image, image, boxes: r.boxes })
        })
        .collect()
}
