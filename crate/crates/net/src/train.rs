//! Two-pass (original + mirrored) training with Adam and best-model
//! tracking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use maskdet_core::flip::{flip_back_heatmap, flip_sample};
use maskdet_core::grid::{GeometryError, GridConfig, GridIndex};
use maskdet_core::loss::{self, LossWeights};
use maskdet_core::map::{ImageTensor, ShapeError};
use maskdet_core::synth::Sample;
use maskdet_core::target::{encode_targets, TargetError, TargetPack};
use maskdet_core::triplet::{mine_triplets, plan_triplets, triplet_loss};
use maskdet_core::{sub_seed, PredictionPack};

use crate::losses;
use crate::model::{Model, ModelError, Outputs, Param};
use crate::tape::{Tape, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("non-finite {component} loss ({value}) at step {step}")]
    NonFinite { step: usize, component: &'static str, value: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Which terms enter the total loss, and with what weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub weights: LossWeights,
    pub triplet: bool,
    pub consistency: bool,
    /// Average the center loss over the original and mirrored passes.
    pub flipped_center: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Self { weights: LossWeights::default(), triplet: true, consistency: true, flipped_center: true }
    }
}

impl Objective {
    pub fn center_only(weights: LossWeights) -> Self {
        Self { weights, triplet: false, consistency: false, flipped_center: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fractions of `iterations` at which the rate is multiplied by `lr_factor`.
    pub lr_milestones: Vec<f64>,
    pub lr_factor: f64,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 16,
            learning_rate: 2e-3,
            lr_milestones: vec![0.4, 0.8],
            lr_factor: 0.1,
            seed: 0,
            objective: Objective::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(TrainError::Config("lr milestones are fractions in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| step as f64 >= m * self.iterations as f64).count();
        self.learning_rate * self.lr_factor.powi(drops as i32)
    }
}

/// A training image with everything the objective needs precomputed.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub image: ImageTensor,
    pub flipped: ImageTensor,
    pub targets: TargetPack,
    pub flipped_targets: TargetPack,
    pub center_pairs: Vec<(GridIndex, GridIndex)>,
}

impl PreparedSample {
    pub fn new(sample: &Sample, grid: &GridConfig) -> Result<Self, TrainError> {
        let pair = flip_sample(&sample.image, &sample.boxes, grid)?;
        Ok(Self {
            targets: encode_targets(&pair.original_annotations, grid)?,
            flipped_targets: encode_targets(&pair.flipped_annotations, grid)?,
            image: pair.original_image,
            flipped: pair.flipped_image,
            center_pairs: pair.center_pairs,
        })
    }

    pub fn prepare_all(samples: &[Sample], grid: &GridConfig) -> Result<Vec<Self>, TrainError> {
        samples.iter().map(|s| Self::new(s, grid)).collect()
    }
}

/// Loss components of one image, or their mean over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub offset: f64,
    pub size: f64,
    pub center: f64,
    pub triplet: f64,
    pub consistency_cls: f64,
    pub consistency_loc: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn components(&self) -> [(&'static str, f64); 8] {
        [
            ("focal", self.focal),
            ("offset", self.offset),
            ("size", self.size),
            ("center", self.center),
            ("triplet", self.triplet),
            ("consistency_cls", self.consistency_cls),
            ("consistency_loc", self.consistency_loc),
            ("total", self.total),
        ]
    }

    fn add_scaled(&mut self, other: &LossBreakdown, k: f64) {
        self.focal += k * other.focal;
        self.offset += k * other.offset;
        self.size += k * other.size;
        self.center += k * other.center;
        self.triplet += k * other.triplet;
        self.consistency_cls += k * other.consistency_cls;
        self.consistency_loc += k * other.consistency_loc;
        self.total += k * other.total;
    }

    pub fn check_finite(&self, step: usize) -> Result<(), TrainError> {
        match self.components().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((component, value)) => Err(TrainError::NonFinite { step, component, value }),
            None => Ok(()),
        }
    }
}

/// Center-loss parts of one pass: focal, offset, size.
fn center_terms_tape(tape: &mut Tape, out: &Outputs, t: &TargetPack, w: &LossWeights) -> [Var; 3] {
    let n = t.n_objects;
    [
        losses::focal(tape, out.heatmap, &t.heatmap, n, w.alpha, w.beta),
        losses::regression(tape, out.offsets, &t.offsets(), n, w.regression, w.smooth_l1_beta),
        losses::regression(tape, out.sizes, &t.sizes(), n, w.regression, w.smooth_l1_beta),
    ]
}

fn center_terms_ref(p: &PredictionPack, t: &TargetPack, w: &LossWeights) -> Result<[f64; 3], ShapeError> {
    let n = t.n_objects;
    Ok([
        loss::focal_pixel_loss(&p.heatmap, &t.heatmap, n, w.alpha, w.beta)?,
        loss::regression_loss_with(&p.offsets, &t.offsets(), n, w.regression, w.smooth_l1_beta)?,
        loss::regression_loss_with(&p.sizes, &t.sizes(), n, w.regression, w.smooth_l1_beta)?,
    ])
}

/// Record the full objective of one image on `tape`; returns the total and
/// the component values.
pub fn record_objective(
    tape: &mut Tape,
    model: &Model,
    vars: &[Var],
    sample: &PreparedSample,
    obj: &Objective,
    mining_seed: u64,
) -> Result<(Var, LossBreakdown), TrainError> {
    let w = &obj.weights;
    let out = model.forward(tape, vars, &sample.image)?;
    let need_flip = obj.flipped_center || obj.consistency;
    let out_f = if need_flip { Some(model.forward(tape, vars, &sample.flipped)?) } else { None };

    let mut parts = vec![center_terms_tape(tape, &out, &sample.targets, w)];
    if obj.flipped_center {
        parts.push(center_terms_tape(tape, out_f.as_ref().expect("flipped pass"), &sample.flipped_targets, w));
    }
    let k = 1.0 / parts.len() as f64;
    let mut b = LossBreakdown::default();
    let mut total_terms = Vec::new();
    for [f, o, s] in &parts {
        b.focal += k * tape.scalar(*f);
        b.offset += k * tape.scalar(*o);
        b.size += k * tape.scalar(*s);
        total_terms.extend([(*f, k * w.lambda_pix), (*o, k * w.lambda_off), (*s, k * w.lambda_s)]);
    }
    b.center = loss::center_loss(b.focal, b.offset, b.size, w);

    if obj.triplet {
        let plan = plan_triplets(&sample.targets, mining_seed);
        let tri = losses::triplet(tape, out.embeddings, &plan, w.margin);
        b.triplet = tape.scalar(tri);
        total_terms.push((tri, w.lambda_tri));
    }
    if let Some(out_f) = out_f.filter(|_| obj.consistency) {
        let back = tape.mirror(out_f.heatmap);
        let cls = losses::consistency_cls(tape, out.heatmap, back, &sample.targets.mask, w.consistency);
        let loc = losses::consistency_loc(tape, out.offsets, out.sizes, out_f.offsets, out_f.sizes, &sample.center_pairs, w.flip_offset_pivot);
        b.consistency_cls = tape.scalar(cls);
        b.consistency_loc = tape.scalar(loc);
        total_terms.extend([(cls, w.lambda_con), (loc, w.lambda_con)]);
    }
    b.total = loss::total_loss(b.center, b.triplet, b.consistency_cls + b.consistency_loc, w);
    let total = tape.weighted_sum(&total_terms);
    Ok((total, b))
}

/// The same objective computed from plain forward passes and the reference
/// loss functions, without a tape.
pub fn evaluate_objective(model: &Model, sample: &PreparedSample, obj: &Objective, mining_seed: u64) -> Result<LossBreakdown, TrainError> {
    let w = &obj.weights;
    let p = model.predict(&sample.image)?;
    let need_flip = obj.flipped_center || obj.consistency;
    let p_f = if need_flip { Some(model.predict(&sample.flipped)?) } else { None };
    let mut parts = vec![center_terms_ref(&p, &sample.targets, w)?];
    if obj.flipped_center {
        parts.push(center_terms_ref(p_f.as_ref().expect("flipped pass"), &sample.flipped_targets, w)?);
    }
    let k = 1.0 / parts.len() as f64;
    let mut b = LossBreakdown::default();
    for [f, o, s] in &parts {
        b.focal += k * f;
        b.offset += k * o;
        b.size += k * s;
    }
    b.center = loss::center_loss(b.focal, b.offset, b.size, w);
    if obj.triplet {
        b.triplet = triplet_loss(&mine_triplets(&p.embeddings, &sample.targets, mining_seed), w.margin);
    }
    if let Some(p_f) = p_f.filter(|_| obj.consistency) {
        let back = flip_back_heatmap(&p_f.heatmap);
        b.consistency_cls = loss::consistency_cls_loss(&p.heatmap, &back, &sample.targets.mask, w.consistency)?;
        b.consistency_loc = loss::consistency_loc_loss_with(&p.offsets, &p.sizes, &p_f.offsets, &p_f.sizes, &sample.center_pairs, w.flip_offset_pivot)?;
    }
    b.total = loss::total_loss(b.center, b.triplet, b.consistency_cls + b.consistency_loc, w);
    Ok(b)
}

/// Mean loss over `batch` and its gradient for every parameter.
pub fn batch_gradients(
    model: &Model,
    batch: &[&PreparedSample],
    obj: &Objective,
    mining_seeds: &[u64],
) -> Result<(LossBreakdown, Vec<Vec<f64>>), TrainError> {
    let mut grads: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
    let mut mean = LossBreakdown::default();
    let k = 1.0 / batch.len() as f64;
    for (sample, &seed) in batch.iter().zip(mining_seeds) {
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let (total, parts) = record_objective(&mut tape, model, &vars, sample, obj, seed)?;
        mean.add_scaled(&parts, k);
        tape.backward(total);
        for (g, v) in grads.iter_mut().zip(&vars) {
            if let Some(d) = tape.grad(*v) {
                g.iter_mut().zip(d).for_each(|(g, d)| *g += k * d);
            }
        }
    }
    Ok((mean, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Param]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, params: &mut [Param], grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub learning_rate: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub struct Trainer<'a> {
    pub model: Model,
    pub optimizer: Adam,
    pub config: TrainConfig,
    data: &'a [PreparedSample],
    step: usize,
    order: Vec<usize>,
    cursor: usize,
    order_rng: ChaCha8Rng,
    mining_seed: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, config: TrainConfig, data: &'a [PreparedSample]) -> Result<Self, TrainError> {
        config.validate()?;
        model.validate()?;
        if data.is_empty() && config.iterations > 0 {
            return Err(TrainError::Config("training set is empty".into()));
        }
        Ok(Self {
            optimizer: Adam::new(&model.params),
            order_rng: ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "order")),
            mining_seed: sub_seed(config.seed, "mining"),
            order: Vec::new(),
            cursor: 0,
            step: 0,
            model,
            config,
            data,
        })
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size.min(self.data.len()) {
            if self.cursor == self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.order_rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Compute the batch loss at the current parameters, then update them.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let idx = self.next_batch();
        let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &self.data[i]).collect();
        let seeds: Vec<u64> = idx.iter().map(|i| sub_seed(self.mining_seed, &format!("{}/{i}", self.step))).collect();
        let (loss, grads) = batch_gradients(&self.model, &batch, &self.config.objective, &seeds)?;
        loss.check_finite(self.step)?;
        let lr = self.config.learning_rate_at(self.step);
        self.optimizer.update(&mut self.model.params, &grads, lr);
        let record = StepRecord { step: self.step, learning_rate: lr, loss };
        self.step += 1;
        Ok(record)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the step with the smallest recorded total loss, or the
    /// initial parameters when no step ran.
    pub best: Model,
    pub best_step: Option<usize>,
    pub best_loss: f64,
    pub last: Model,
    pub optimizer: Adam,
    pub log: Vec<StepRecord>,
}

/// Run `config.iterations` steps, calling `on_step` after each.
pub fn train(model: Model, config: TrainConfig, data: &[PreparedSample], mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(model, config, data)?;
    let mut best = trainer.model.clone();
    let (mut best_step, mut best_loss) = (None, f64::INFINITY);
    let mut log = Vec::with_capacity(trainer.config.iterations);
    for _ in 0..trainer.config.iterations {
        let before = trainer.model.params.clone();
        let record = trainer.step()?;
        if record.loss.total < best_loss {
            best_loss = record.loss.total;
            best_step = Some(record.step);
            best.params = before;
        }
        on_step(&record);
        log.push(record);
    }
    Ok(TrainOutcome { best, best_step, best_loss, last: trainer.model, optimizer: trainer.optimizer, log })
}
