//! Differentiable side of the detector: a small reverse-mode autodiff tape,
//! the CBAM-equipped toy network, the training objectives recorded on the
//! tape, Adam training with best-model tracking, checkpoints and the
//! finite-difference gradient suite.

pub mod checkpoint;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod tape;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use model::{CbamOrder, Model, ModelConfig, ModelError};
pub use tape::{Tape, Var};
pub use train::{train, LossBreakdown, Objective, PreparedSample, StepRecord, TrainConfig, TrainError, TrainOutcome};
