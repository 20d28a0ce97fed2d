//! Mathematical core of an anchor-free detector for faces with and without
//! masks: stride-grid geometry, Gaussian heatmap targets, the training
//! objectives (focal, offset, size, triplet, flip consistency), keypoint
//! decoding, precision/recall evaluation and a synthetic scene generator.
//!
//! Everything in this crate is a pure function over plain `f64` buffers. The
//! differentiable counterparts of the losses live in `maskdet-net`, which
//! uses the forward functions here as its finite-difference reference.

pub mod annotations;
pub mod decode;
pub mod eval;
pub mod flip;
pub mod grid;
pub mod loss;
pub mod map;
pub mod raster;
pub mod seed;
pub mod synth;
pub mod target;
pub mod triplet;

pub use decode::{decode, peak_extract, DecodeConfig, Detection, Peak, PredictionPack};
pub use eval::{iou, match_detections, precision_recall, EvalReport, MatchCounts};
pub use flip::{flip_back_heatmap, flip_back_regression, flip_sample, FlipPair};
pub use grid::{center_of, grid_to_image, project_to_grid, BBox, GeometryError, GridConfig, GridIndex, Keypoint};
pub use loss::{LossWeights, RegressionMode};
pub use map::{FieldMap, Mask, ShapeError};
pub use seed::sub_seed;
pub use target::{encode_targets, gaussian_sigma, splat_gaussian, TargetPack};
pub use triplet::{mine_triplets, TripletBatch};

/// Class id of an unmasked face.
pub const FACE: usize = 0;
/// Class id of a face wearing a mask.
pub const MASKED_FACE: usize = 1;
/// Number of object classes the detector distinguishes.
pub const NUM_CLASSES: usize = 2;
