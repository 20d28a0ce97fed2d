//! Command-line flags. Every default is shown by `--help` together with
//! where it comes from: the published method, or a choice made for this
//! toy-scale reproduction.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use maskdet_core::decode::DecodeConfig;
use maskdet_core::loss::{ConsistencyMode, LossWeights, RegressionMode};
use maskdet_core::synth::SceneSpec;
use maskdet_net::{CbamOrder, ModelConfig, Objective, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "maskdet", version, about = "Anchor-free face / masked-face detector on synthetic scenes")]
pub struct Cli {
    /// Master seed; data, initialization and mining use named sub-seeds of it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset: PNG images plus annotations.jsonl.
    Synth(SynthArgs),
    /// Encode the annotations of a dataset into training targets (JSONL).
    Encode(EncodeArgs),
    /// Check every hand-written gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train a detector and write its checkpoint and per-step loss log.
    Train(TrainArgs),
    /// Run a checkpoint on images and write detections (JSONL).
    Detect(DetectArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Train every loss configuration over several seeds and tabulate.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegressionArg {
    L1,
    Smoothl1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CbamArg {
    /// Channel attention, then spatial.
    Cs,
    /// Spatial attention, then channel.
    Sc,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConsistencyArg {
    /// Squared difference over foreground cells.
    L2,
    /// Per-class Bernoulli Jensen-Shannon divergence.
    Jsd,
}

#[derive(Clone, Debug, Args)]
pub struct GridArgs {
    /// Output stride of the prediction grid (published setting).
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
}

#[derive(Clone, Debug, Args)]
pub struct LossArgs {
    /// Focal exponent on the prediction terms (published setting).
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    /// Focal exponent on the Gaussian penalty (published setting).
    #[arg(long, default_value_t = 4.0)]
    pub beta: f64,
    /// Weight of the focal heatmap loss (published setting).
    #[arg(long, default_value_t = 1.0)]
    pub lambda_pix: f64,
    /// Weight of the offset loss (published setting).
    #[arg(long, default_value_t = 1.0)]
    pub lambda_off: f64,
    /// Weight of the size loss (published setting).
    #[arg(long, default_value_t = 0.01)]
    pub lambda_s: f64,
    /// Weight of the triplet loss (published setting).
    #[arg(long, default_value_t = 1.0)]
    pub lambda_tri: f64,
    /// Weight of the flip-consistency losses (published setting).
    #[arg(long, default_value_t = 100.0)]
    pub lambda_con: f64,
    /// Triplet margin (not published; chosen here).
    #[arg(long, default_value_t = 0.3)]
    pub margin: f64,
    /// Offset/size regression penalty (published preference: l1).
    #[arg(long, value_enum, default_value_t = RegressionArg::L1)]
    pub regression: RegressionArg,
    /// Quadratic-zone width of smooth L1 (conventional value).
    #[arg(long, default_value_t = 1.0)]
    pub smooth_l1_beta: f64,
    /// Heatmap consistency penalty (published default: l2).
    #[arg(long, value_enum, default_value_t = ConsistencyArg::L2)]
    pub consistency: ConsistencyArg,
    /// Value horizontal offsets are mirrored about in the localization
    /// consistency term; 0 is the published form, 0.5 matches offsets
    /// measured from the cell corner (chosen here).
    #[arg(long, default_value_t = 0.5)]
    pub flip_offset_pivot: f64,
}

impl LossArgs {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_pix: self.lambda_pix,
            lambda_off: self.lambda_off,
            lambda_s: self.lambda_s,
            lambda_tri: self.lambda_tri,
            lambda_con: self.lambda_con,
            alpha: self.alpha,
            beta: self.beta,
            margin: self.margin,
            regression: match self.regression {
                RegressionArg::L1 => RegressionMode::L1,
                RegressionArg::Smoothl1 => RegressionMode::SmoothL1,
            },
            smooth_l1_beta: self.smooth_l1_beta,
            consistency: match self.consistency {
                ConsistencyArg::L2 => ConsistencyMode::MaskedL2,
                ConsistencyArg::Jsd => ConsistencyMode::BernoulliJsd,
            },
            flip_offset_pivot: self.flip_offset_pivot,
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct ModelArgs {
    /// Order of the attention modules after each block (published: cs).
    #[arg(long, value_enum, default_value_t = CbamArg::Cs)]
    pub cbam: CbamArg,
    /// Embedding channels used by the triplet loss (chosen here).
    #[arg(long, default_value_t = 8)]
    pub embed_dim: usize,
}

impl ModelArgs {
    /// Model whose total stride equals `stride`: the first log2(stride)
    /// blocks downsample by 2.
    pub fn config(&self, stride: usize) -> Result<ModelConfig> {
        let base = ModelConfig::default();
        if !stride.is_power_of_two() || stride.trailing_zeros() as usize > base.channels.len() {
            bail!("--stride {stride} is not supported: use a power of two up to {}", 1 << base.channels.len());
        }
        let downsample = stride.trailing_zeros() as usize;
        let strides = (0..base.channels.len()).map(|b| if b < downsample { 2 } else { 1 }).collect();
        let cbam = match self.cbam {
            CbamArg::Cs => CbamOrder::ChannelThenSpatial,
            CbamArg::Sc => CbamOrder::SpatialThenChannel,
            CbamArg::Off => CbamOrder::Off,
        };
        Ok(ModelConfig { strides, cbam, embed_dim: self.embed_dim, ..base })
    }
}

#[derive(Clone, Debug, Args)]
pub struct DecodeArgs {
    /// Minimum peak score kept as a detection (not published; chosen here).
    #[arg(long, default_value_t = 0.3)]
    pub score_threshold: f64,
    /// Maximum detections per image (not published; chosen here).
    #[arg(long, default_value_t = 100)]
    pub topk: usize,
    /// Side of the local-maximum window, odd (chosen here).
    #[arg(long, default_value_t = 3)]
    pub peak_window: usize,
}

impl DecodeArgs {
    pub fn config(&self) -> Result<DecodeConfig> {
        if self.peak_window % 2 == 0 {
            bail!("--peak-window must be odd, got {}", self.peak_window);
        }
        Ok(DecodeConfig { score_threshold: self.score_threshold, top_k: self.topk, peak_window: self.peak_window })
    }
}

#[derive(Clone, Debug, Args)]
pub struct TrainOpts {
    /// Optimizer steps (chosen here for toy scale).
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    /// Images per step (chosen here).
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Adam base learning rate (published 1.25e-4 is too slow from scratch at
    /// toy scale; chosen here).
    #[arg(long = "lr", default_value_t = TrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    /// Fractions of the run at which the rate drops (scaled from the
    /// published epoch schedule).
    #[arg(long, value_delimiter = ',', default_values_t = TrainConfig::default().lr_milestones)]
    pub lr_milestones: Vec<f64>,
    /// Rate multiplier at each milestone (published setting).
    #[arg(long, default_value_t = 0.1)]
    pub lr_factor: f64,
    /// Drop the triplet term.
    #[arg(long)]
    pub no_triplet: bool,
    /// Drop both flip-consistency terms.
    #[arg(long)]
    pub no_consistency: bool,
}

impl TrainOpts {
    pub fn config(&self, weights: LossWeights, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_milestones: self.lr_milestones.clone(),
            lr_factor: self.lr_factor,
            seed,
            objective: Objective { weights, triplet: !self.no_triplet, consistency: !self.no_consistency, flipped_center: true },
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct SceneArgs {
    /// Image width in pixels (chosen here).
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Image height in pixels (chosen here).
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    /// Fewest faces per scene.
    #[arg(long, default_value_t = 1)]
    pub min_objects: usize,
    /// Most faces per scene.
    #[arg(long, default_value_t = 4)]
    pub max_objects: usize,
    /// Fraction of faces wearing a mask.
    #[arg(long, default_value_t = 0.5)]
    pub masked_fraction: f64,
    /// Probability that an unmasked face gets a hand-like occluder.
    #[arg(long, default_value_t = 0.3)]
    pub confuser_prob: f64,
    /// Amplitude of the additive uniform pixel noise.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
}

impl SceneArgs {
    pub fn spec(&self, seed: u64, stride: usize) -> SceneSpec {
        SceneSpec {
            width: self.width,
            height: self.height,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            masked_fraction: self.masked_fraction,
            confuser_prob: self.confuser_prob,
            noise: self.noise,
            stride,
            seed,
            ..SceneSpec::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 400)]
    pub images: usize,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Annotation file of the dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSONL; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random instances per loss.
    #[arg(long, default_value_t = maskdet_net::gradcheck::DEFAULT_INSTANCES)]
    pub instances: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Annotation file of the training set.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint of the best model (smallest recorded total loss).
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss log; defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also write the final-step model and optimizer state here.
    #[arg(long)]
    pub last: Option<PathBuf>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Annotation file listing the images (boxes are ignored).
    #[arg(long, required_unless_present = "image")]
    pub data: Option<PathBuf>,
    /// Individual PNG images.
    #[arg(long, num_args = 1..)]
    pub image: Vec<PathBuf>,
    /// Output JSONL; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth annotation file.
    #[arg(long)]
    pub data: PathBuf,
    /// Detections JSONL written by `detect`.
    #[arg(long)]
    pub detections: PathBuf,
    /// Minimum IoU for a match (not published; conventional value).
    #[arg(long, default_value_t = maskdet_core::eval::DEFAULT_IOU_THRESHOLD)]
    pub iou_threshold: f64,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Number of seeds per configuration, starting at --seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long, default_value_t = 300)]
    pub train_images: usize,
    #[arg(long, default_value_t = 100)]
    pub test_images: usize,
    /// Minimum IoU for a match (not published; conventional value).
    #[arg(long, default_value_t = maskdet_core::eval::DEFAULT_IOU_THRESHOLD)]
    pub iou_threshold: f64,
    /// Write the table (markdown) here as well as to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write per-run results as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub decode: DecodeArgs,
}
