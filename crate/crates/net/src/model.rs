//! Toy convolutional detector: strided 3×3 blocks, each followed by a CBAM
//! attention module, and four 1×1 heads at the output stride.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use maskdet_core::decode::PredictionPack;
use maskdet_core::map::ImageTensor;

use crate::tape::{Shape, Tape, Var};

/// Prior probability of the heatmap bias: `-ln((1 - 0.1) / 0.1)`.
pub const HEATMAP_BIAS: f64 = -2.19;
/// Box side (pixels) the size head predicts before training.
pub const INITIAL_SIZE: f64 = 16.0;
/// Sub-cell offset the offset head predicts before training: the middle of
/// the `[0, 1)` target range.
pub const INITIAL_OFFSET: f64 = 0.5;
/// Spread of the random embedding-head bias.
pub const EMBEDDING_BIAS_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CbamOrder {
    /// Channel attention, then spatial attention.
    #[serde(rename = "cs")]
    ChannelThenSpatial,
    #[serde(rename = "sc")]
    SpatialThenChannel,
    #[serde(rename = "off")]
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels of each block.
    pub channels: Vec<usize>,
    /// Convolution stride of each block.
    pub strides: Vec<usize>,
    pub num_classes: usize,
    pub embed_dim: usize,
    /// Channel-attention MLP reduction ratio.
    pub reduction: usize,
    pub spatial_kernel: usize,
    pub cbam: CbamOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: vec![16, 32, 32],
            strides: vec![2, 2, 1],
            num_classes: maskdet_core::NUM_CLASSES,
            embed_dim: 8,
            reduction: 4,
            spatial_kernel: 7,
            cbam: CbamOrder::ChannelThenSpatial,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image is {channels}×{height}×{width}; expected {expected_channels} channels and sides divisible by {stride}")]
    Input { channels: usize, height: usize, width: usize, expected_channels: usize, stride: usize },
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    Param { name: String, expected: Shape, found: Shape },
}

impl ModelConfig {
    /// Two blocks of four channels; used by the end-to-end gradient check.
    pub fn micro() -> Self {
        Self { channels: vec![4, 4], strides: vec![2, 2], embed_dim: 3, reduction: 2, spatial_kernel: 3, ..Self::default() }
    }

    pub fn stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return bad(format!("{} block widths but {} strides", self.channels.len(), self.strides.len()));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.embed_dim == 0 {
            return bad("in_channels, num_classes and embed_dim must be positive".into());
        }
        if self.strides.contains(&0) || self.channels.contains(&0) {
            return bad("block widths and strides must be positive".into());
        }
        if self.reduction == 0 || self.channels.iter().any(|c| c % self.reduction != 0) {
            return bad(format!("every block width must be divisible by the reduction ratio {}", self.reduction));
        }
        if self.spatial_kernel % 2 == 0 {
            return bad(format!("spatial kernel {} must be odd", self.spatial_kernel));
        }
        Ok(())
    }

    /// Name and shape of every parameter, in tape order.
    pub fn layout(&self) -> Vec<(String, Shape)> {
        let mut out = Vec::new();
        let mut prev = self.in_channels;
        for (b, &c) in self.channels.iter().enumerate() {
            out.push((format!("block{b}.conv.weight"), [c, prev * 9, 1]));
            out.push((format!("block{b}.conv.bias"), [c, 1, 1]));
            if self.cbam != CbamOrder::Off {
                let hidden = c / self.reduction;
                out.push((format!("block{b}.channel_att.fc1.weight"), [hidden, c, 1]));
                out.push((format!("block{b}.channel_att.fc1.bias"), [hidden, 1, 1]));
                out.push((format!("block{b}.channel_att.fc2.weight"), [c, hidden, 1]));
                out.push((format!("block{b}.channel_att.fc2.bias"), [c, 1, 1]));
                let k = self.spatial_kernel;
                out.push((format!("block{b}.spatial_att.weight"), [1, 2 * k * k, 1]));
                out.push((format!("block{b}.spatial_att.bias"), [1, 1, 1]));
            }
            prev = c;
        }
        for (head, c) in [("heatmap", self.num_classes), ("offset", 2), ("size", 2), ("embedding", self.embed_dim)] {
            out.push((format!("head.{head}.weight"), [c, prev, 1]));
            out.push((format!("head.{head}.bias"), [c, 1, 1]));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Param>,
}

/// Fields of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub heatmap: Var,
    pub offsets: Var,
    pub sizes: Var,
    pub embeddings: Var,
}

struct Cursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.at];
        self.at += 1;
        v
    }
}

fn size_bias(stride: usize) -> f64 {
    // softplus⁻¹(INITIAL_SIZE / stride)
    let y = INITIAL_SIZE / stride as f64;
    y + (-(-y).exp()).ln_1p()
}

impl Model {
    /// He-normal weights, zero biases except the four heads.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stride = config.stride();
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n = shape[0] * shape[1] * shape[2];
                let data = if name.ends_with(".weight") {
                    let fan_in = shape[1] as f64;
                    let gain = if name.starts_with("head.") { 1.0 } else { 2.0 };
                    let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("finite std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                } else if name == "head.heatmap.bias" {
                    vec![HEATMAP_BIAS; n]
                } else if name == "head.offset.bias" {
                    vec![INITIAL_OFFSET; n]
                } else if name == "head.size.bias" {
                    vec![size_bias(stride); n]
                } else if name == "head.embedding.bias" {
                    // A cell whose features are all zero embeds as this
                    // bias; a zero vector has no direction to normalize.
                    let normal = Normal::new(0.0, EMBEDDING_BIAS_STD).expect("finite std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                } else {
                    vec![0.0; n]
                };
                Param { name, shape, data }
            })
            .collect();
        Ok(Model { config, params })
    }

    /// Check every parameter against the layout implied by the config.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let layout = self.config.layout();
        if layout.len() != self.params.len() {
            return Err(ModelError::Config(format!("{} parameters, config implies {}", self.params.len(), layout.len())));
        }
        for ((name, shape), p) in layout.iter().zip(&self.params) {
            if &p.name != name || p.shape != *shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(ModelError::Param { name: name.clone(), expected: *shape, found: p.shape });
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Put the parameters on `tape` as trainable leaves.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.parameter(p.shape, p.data.clone())).collect()
    }

    /// Put the parameters on `tape` as constants (inference only).
    pub fn register_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.shape, p.data.clone())).collect()
    }

    pub fn check_input(&self, image: &ImageTensor) -> Result<(), ModelError> {
        let s = self.config.stride();
        if image.channels != self.config.in_channels || image.height % s != 0 || image.width % s != 0 || image.height == 0 || image.width == 0 {
            return Err(ModelError::Input {
                channels: image.channels,
                height: image.height,
                width: image.width,
                expected_channels: self.config.in_channels,
                stride: s,
            });
        }
        Ok(())
    }

    /// Record one forward pass using parameter vars from [`Model::register`].
    pub fn forward(&self, tape: &mut Tape, params: &[Var], image: &ImageTensor) -> Result<Outputs, ModelError> {
        self.check_input(image)?;
        let cfg = &self.config;
        let mut cur = Cursor { vars: params, at: 0 };
        let input = tape.constant_map(image);
        let mut x = tape.affine(input, 1.0, -0.5);
        for &stride in &cfg.strides {
            let (w, b) = (cur.next(), cur.next());
            let conv = tape.conv2d(x, w, b, 3, stride, 1);
            x = tape.relu(conv);
            if cfg.cbam != CbamOrder::Off {
                let mlp = [cur.next(), cur.next(), cur.next(), cur.next()];
                let spatial = [cur.next(), cur.next()];
                x = match cfg.cbam {
                    CbamOrder::ChannelThenSpatial => {
                        let y = cbam_channel(tape, x, mlp);
                        cbam_spatial(tape, y, spatial, cfg.spatial_kernel)
                    }
                    CbamOrder::SpatialThenChannel => {
                        let y = cbam_spatial(tape, x, spatial, cfg.spatial_kernel);
                        cbam_channel(tape, y, mlp)
                    }
                    CbamOrder::Off => unreachable!(),
                };
            }
        }
        let mut head = |tape: &mut Tape| {
            let (w, b) = (cur.next(), cur.next());
            tape.conv2d(x, w, b, 1, 1, 0)
        };
        let logits = head(tape);
        let heatmap = tape.sigmoid(logits);
        let offsets = head(tape);
        let raw_size = head(tape);
        let soft = tape.softplus(raw_size);
        let sizes = tape.scale(soft, cfg.stride() as f64);
        let raw_embed = head(tape);
        let embeddings = tape.normalize_channels(raw_embed);
        Ok(Outputs { heatmap, offsets, sizes, embeddings })
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, image: &ImageTensor) -> Result<PredictionPack, ModelError> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let out = self.forward(&mut tape, &vars, image)?;
        Ok(pack(&tape, &out))
    }
}

pub fn pack(tape: &Tape, out: &Outputs) -> PredictionPack {
    PredictionPack {
        heatmap: tape.to_map(out.heatmap),
        offsets: tape.to_map(out.offsets),
        sizes: tape.to_map(out.sizes),
        embeddings: tape.to_map(out.embeddings),
    }
}

/// `F · σ(MLP(avgpool F) + MLP(maxpool F))` channelwise; `mlp` holds
/// `[fc1.w, fc1.b, fc2.w, fc2.b]` shared by both branches.
pub fn cbam_channel(tape: &mut Tape, x: Var, mlp: [Var; 4]) -> Var {
    let [w1, b1, w2, b2] = mlp;
    let branch = |tape: &mut Tape, v: Var| {
        let h = tape.dense(v, w1, b1);
        let h = tape.relu(h);
        tape.dense(h, w2, b2)
    };
    let avg = tape.global_avg_pool(x);
    let max = tape.global_max_pool(x);
    let a = branch(tape, avg);
    let m = branch(tape, max);
    let sum = tape.add(a, m);
    let att = tape.sigmoid(sum);
    tape.scale_channels(x, att)
}

/// `F · σ(conv([avg_c F, max_c F]))` per spatial cell.
pub fn cbam_spatial(tape: &mut Tape, x: Var, conv: [Var; 2], kernel: usize) -> Var {
    let avg = tape.channel_avg_pool(x);
    let max = tape.channel_max_pool(x);
    let cat = tape.concat(&[avg, max]);
    let logits = tape.conv2d(cat, conv[0], conv[1], kernel, 1, kernel / 2);
    let att = tape.sigmoid(logits);
    tape.scale_spatial(x, att)
}
