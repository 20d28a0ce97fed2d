//! Generate → train → evaluate pipelines shared by `train`, `ablate` and the
//! acceptance suite.

use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use serde::Serialize;

use maskdet_core::decode::{decode, DecodeConfig, Detection};
use maskdet_core::eval::{match_detections, precision_recall, EvalReport, MatchCounts};
use maskdet_core::grid::GridConfig;
use maskdet_core::loss::RegressionMode;
use maskdet_core::synth::{generate_dataset, Sample, SceneSpec};
use maskdet_core::sub_seed;
use maskdet_net::{train, Model, ModelConfig, Objective, PreparedSample, TrainConfig, TrainOutcome};

/// Everything that defines one toy experiment. All randomness derives from
/// `seed` through named sub-seeds.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub train_images: usize,
    pub test_images: usize,
    pub scene: SceneSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub iou_threshold: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train_images: 300,
            test_images: 100,
            scene: SceneSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            iou_threshold: maskdet_core::eval::DEFAULT_IOU_THRESHOLD,
        }
    }
}

impl ExperimentSpec {
    pub fn grid(&self) -> Result<GridConfig> {
        Ok(GridConfig::new(self.scene.height, self.scene.width, self.model.stride(), self.model.num_classes)?)
    }

    /// Train and test scenes: indices `0..train` and `train..train+test` of
    /// one dataset stream.
    pub fn datasets(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let scene = SceneSpec { seed: sub_seed(self.seed, "data"), stride: self.model.stride(), ..self.scene.clone() };
        let mut all = generate_dataset(&scene, self.train_images + self.test_images)?;
        let test = all.split_off(self.train_images);
        Ok((all, test))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentResult {
    pub seed: u64,
    pub report: EvalReport,
    pub best_step: Option<usize>,
    pub best_loss: f64,
    #[serde(skip)]
    pub elapsed: Duration,
    #[serde(skip)]
    pub outcome: Option<TrainOutcome>,
}

pub fn detect(model: &Model, image: &maskdet_core::map::ImageTensor, decode_cfg: &DecodeConfig, grid: &GridConfig) -> Result<Vec<Detection>> {
    let pred = model.predict(image)?;
    Ok(decode(&pred, decode_cfg, grid)?)
}

pub fn evaluate(model: &Model, samples: &[Sample], decode_cfg: &DecodeConfig, grid: &GridConfig, iou_threshold: f64) -> Result<EvalReport> {
    let mut counts = MatchCounts::new(model.config.num_classes);
    for s in samples {
        let dets = detect(model, &s.image, decode_cfg, grid).with_context(|| format!("detecting on {}", s.name))?;
        counts.accumulate(&match_detections(&dets, &s.boxes, iou_threshold, model.config.num_classes));
    }
    Ok(precision_recall(&counts, iou_threshold))
}

/// Generate data, train from a seeded initialization and evaluate the
/// returned (best) model on the held-out scenes.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let start = Instant::now();
    let grid = spec.grid()?;
    let (train_set, test_set) = spec.datasets()?;
    let data = PreparedSample::prepare_all(&train_set, &grid)?;
    let model = Model::init(spec.model.clone(), sub_seed(spec.seed, "init"))?;
    let cfg = TrainConfig { seed: spec.seed, ..spec.train.clone() };
    let outcome = train(model, cfg, &data, |_| {})?;
    let report = evaluate(&outcome.best, &test_set, &spec.decode, &grid, spec.iou_threshold)?;
    Ok(ExperimentResult {
        seed: spec.seed,
        report,
        best_step: outcome.best_step,
        best_loss: outcome.best_loss,
        elapsed: start.elapsed(),
        outcome: Some(outcome),
    })
}

/// One row of an ablation table: a configuration evaluated over seeds.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub runs: Vec<ExperimentResult>,
}

impl AblationRow {
    fn mean(&self, f: impl Fn(&EvalReport) -> f64) -> f64 {
        self.runs.iter().map(|r| f(&r.report)).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn mean_f1(&self) -> f64 {
        self.mean(EvalReport::mean_f1)
    }

    pub fn mean_precision(&self) -> f64 {
        self.mean(|r| r.classes.iter().map(|c| c.precision).sum::<f64>() / r.classes.len() as f64)
    }

    pub fn mean_recall(&self) -> f64 {
        self.mean(|r| r.classes.iter().map(|c| c.recall).sum::<f64>() / r.classes.len() as f64)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    /// Loss-toggle grid: center-only, +triplet, +consistency, +both.
    pub losses: Vec<AblationRow>,
    /// Full objective with L1 and with smooth-L1 regression.
    pub regression: Vec<AblationRow>,
}

pub const LOSS_CONFIGS: [(&str, bool, bool); 4] =
    [("center-only", false, false), ("+triplet", true, false), ("+consistency", false, true), ("+both", true, true)];

fn run_row(name: &str, base: &ExperimentSpec, objective: Objective, seeds: &[u64], progress: &mut impl FnMut(&str, &ExperimentResult)) -> Result<AblationRow> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let spec = ExperimentSpec { seed, train: TrainConfig { objective, ..base.train.clone() }, ..base.clone() };
        let result = run_experiment(&spec).with_context(|| format!("{name}, seed {seed}"))?;
        progress(name, &result);
        runs.push(result);
    }
    Ok(AblationRow { name: name.to_string(), runs })
}

/// The loss-toggle grid plus the regression-mode comparison. The L1 row of
/// the latter reuses the `+both` runs when the base objective uses L1.
pub fn ablate(base: &ExperimentSpec, seeds: &[u64], mut progress: impl FnMut(&str, &ExperimentResult)) -> Result<AblationTable> {
    let weights = base.train.objective.weights;
    let mut losses = Vec::new();
    for (name, triplet, consistency) in LOSS_CONFIGS {
        let objective = Objective { triplet, consistency, ..base.train.objective };
        losses.push(run_row(name, base, objective, seeds, &mut progress)?);
    }
    let full = Objective { triplet: true, consistency: true, ..base.train.objective };
    let mut regression = Vec::new();
    for (name, mode) in [("L1", RegressionMode::L1), ("SmoothL1", RegressionMode::SmoothL1)] {
        if mode == weights.regression {
            regression.push(AblationRow { name: name.to_string(), runs: losses[3].runs.clone() });
        } else {
            let objective = Objective { weights: maskdet_core::LossWeights { regression: mode, ..weights }, ..full };
            regression.push(run_row(name, base, objective, seeds, &mut progress)?);
        }
    }
    Ok(AblationTable { losses, regression })
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let section = |out: &mut String, title: &str, rows: &[AblationRow]| {
            out.push_str(&format!("{title}\n| config | mean F1 | mean precision | mean recall | per-seed F1 |\n|---|---|---|---|---|\n"));
            for r in rows {
                let per: Vec<String> = r.runs.iter().map(|x| format!("{:.3}", x.report.mean_f1())).collect();
                out.push_str(&format!(
                    "| {} | {:.4} | {:.4} | {:.4} | {} |\n",
                    r.name,
                    r.mean_f1(),
                    r.mean_precision(),
                    r.mean_recall(),
                    per.join(" ")
                ));
            }
        };
        section(&mut out, "loss terms", &self.losses);
        out.push('\n');
        section(&mut out, "regression mode", &self.regression);
        out
    }
}
