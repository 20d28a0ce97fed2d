//! One function per subcommand.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use maskdet_core::annotations::{read_detections, write_detections, DetectionRecord};
use maskdet_core::eval::{match_detections, precision_recall, EvalReport, MatchCounts};
use maskdet_core::grid::GridConfig;
use maskdet_core::raster::load_png;
use maskdet_core::synth::{generate_dataset, read_dataset, write_dataset, Sample};
use maskdet_core::target::encode_targets;
use maskdet_core::{sub_seed, Detection};
use maskdet_net::gradcheck::{run_suite, GradcheckReport};
use maskdet_net::{load_checkpoint, save_checkpoint, train, Model, PreparedSample};

use crate::args::*;
use crate::experiment::{ablate, detect, ExperimentSpec};

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn grid_for(samples: &[Sample], stride: usize, num_classes: usize) -> Result<GridConfig> {
    let Some(first) = samples.first() else { bail!("the dataset is empty") };
    let (h, w) = (first.image.height, first.image.width);
    if let Some(s) = samples.iter().find(|s| (s.image.height, s.image.width) != (h, w)) {
        bail!("{} is {}×{} but the first image is {h}×{w}; all images must share one size", s.name, s.image.height, s.image.width);
    }
    Ok(GridConfig::new(h, w, stride, num_classes)?)
}

pub fn synth(seed: u64, a: &SynthArgs) -> Result<()> {
    let spec = a.scene.spec(sub_seed(seed, "data"), a.grid.stride);
    let samples = generate_dataset(&spec, a.images)?;
    let ann = write_dataset(&a.out, &samples)?;
    let objects: usize = samples.iter().map(|s| s.boxes.len()).sum();
    println!("wrote {} images with {objects} objects; annotations in {}", samples.len(), ann.display());
    Ok(())
}

pub fn encode(a: &EncodeArgs) -> Result<()> {
    let samples = load_samples(&a.data)?;
    let grid = grid_for(&samples, a.grid.stride, maskdet_core::NUM_CLASSES)?;
    let mut out = output(a.out.as_deref())?;
    for s in &samples {
        let pack = encode_targets(&s.boxes, &grid).with_context(|| format!("encoding {}", s.name))?;
        let line = serde_json::json!({ "image": s.name, "targets": pack });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn print_gradcheck(reports: &[GradcheckReport]) {
    println!("{:<22} {:>9} {:>11} {:>8} {:>14} {:>10}  result", "loss", "instances", "coordinates", "excluded", "max rel error", "tolerance");
    for r in reports {
        println!(
            "{:<22} {:>9} {:>11} {:>8} {:>14.3e} {:>10.0e}  {}",
            r.name,
            r.instances,
            r.coordinates,
            r.excluded,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
}

/// Returns whether every check passed.
pub fn gradcheck(seed: u64, a: &GradcheckArgs) -> Result<bool> {
    if a.instances == 0 {
        bail!("--instances must be at least 1");
    }
    let reports = run_suite(seed, a.instances);
    print_gradcheck(&reports);
    Ok(reports.iter().all(GradcheckReport::passed))
}

fn default_log_path(out: &Path) -> PathBuf {
    out.with_extension("log.jsonl")
}

pub fn train_cmd(seed: u64, a: &TrainArgs) -> Result<()> {
    let model_cfg = a.model.config(a.grid.stride)?;
    let cfg = a.train.config(a.loss.weights(), seed);
    let model = Model::init(model_cfg.clone(), sub_seed(seed, "init"))?;
    let samples = if a.train.iterations == 0 { Vec::new() } else { load_samples(&a.data)? };
    let data = if samples.is_empty() {
        Vec::new()
    } else {
        let grid = grid_for(&samples, a.grid.stride, model_cfg.num_classes)?;
        PreparedSample::prepare_all(&samples, &grid)?
    };
    let log_path = a.log.clone().unwrap_or_else(|| default_log_path(&a.out));
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut log_err = None;
    let outcome = train(model, cfg, &data, |rec| {
        if log_err.is_none() {
            if let Err(e) = writeln!(log, "{}", serde_json::to_string(rec).expect("log record serializes")) {
                log_err = Some(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    log.flush()?;
    save_checkpoint(&a.out, &outcome.best, None)?;
    if let Some(last) = &a.last {
        save_checkpoint(last, &outcome.last, Some(&outcome.optimizer))?;
    }
    match outcome.best_step {
        Some(step) => println!("best total loss {:.6} at step {step}; checkpoint {}", outcome.best_loss, a.out.display()),
        None => println!("no training steps; untrained checkpoint {}", a.out.display()),
    }
    Ok(())
}

pub fn detect_cmd(a: &DetectArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?.into_model();
    let decode_cfg = a.decode.config()?;
    let images: Vec<(String, maskdet_core::map::ImageTensor)> = match &a.data {
        Some(ann) => load_samples(ann)?.into_iter().map(|s| (s.name, s.image)).collect(),
        None => a
            .image
            .iter()
            .map(|p| Ok((p.display().to_string(), load_png(p).with_context(|| format!("reading {}", p.display()))?)))
            .collect::<Result<_>>()?,
    };
    let mut records = Vec::new();
    for (name, image) in &images {
        let grid = GridConfig::new(image.height, image.width, model.config.stride(), model.config.num_classes)?;
        let dets: Vec<Detection> = detect(&model, image, &decode_cfg, &grid).with_context(|| format!("detecting on {name}"))?;
        records.extend(dets.into_iter().map(|detection| DetectionRecord { image: name.clone(), detection }));
    }
    match &a.out {
        Some(p) => write_detections(p, &records)?,
        None => print!("{}", maskdet_core::annotations::format_detections(&records)),
    }
    Ok(())
}

pub fn eval_report(gt: &[Sample], dets: &[DetectionRecord], iou_threshold: f64, num_classes: usize) -> Result<EvalReport> {
    if let Some(r) = dets.iter().find(|r| !gt.iter().any(|s| s.name == r.image)) {
        bail!("detection for unknown image `{}`", r.image);
    }
    let mut counts = MatchCounts::new(num_classes);
    for s in gt {
        let mine: Vec<Detection> = dets.iter().filter(|r| r.image == s.name).map(|r| r.detection).collect();
        counts.accumulate(&match_detections(&mine, &s.boxes, iou_threshold, num_classes));
    }
    Ok(precision_recall(&counts, iou_threshold))
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let gt = load_samples(&a.data)?;
    let dets = read_detections(&a.detections).with_context(|| format!("reading {}", a.detections.display()))?;
    let report = eval_report(&gt, &dets, a.iou_threshold, maskdet_core::NUM_CLASSES)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(p) = &a.out {
        fs::write(p, json).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn ablate_cmd(seed: u64, a: &AblateArgs) -> Result<()> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let model = a.model.config(a.grid.stride)?;
    let base = ExperimentSpec {
        seed,
        train_images: a.train_images,
        test_images: a.test_images,
        scene: a.scene.spec(seed, model.stride()),
        train: a.train.config(a.loss.weights(), seed),
        model,
        decode: a.decode.config()?,
        iou_threshold: a.iou_threshold,
    };
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|k| seed + k).collect();
    let table = ablate(&base, &seeds, |name, r| {
        eprintln!("{name:<14} seed {:<4} mean F1 {:.4} ({:.1}s)", r.seed, r.report.mean_f1(), r.elapsed.as_secs_f64());
    })?;
    let text = table.render();
    print!("{text}");
    if let Some(p) = &a.out {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.json {
        fs::write(p, serde_json::to_string_pretty(&table)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

/// Run a parsed command line; `Ok(false)` means a check failed.
pub fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth(a) => synth(cli.seed, a)?,
        Command::Encode(a) => encode(a)?,
        Command::Gradcheck(a) => return gradcheck(cli.seed, a),
        Command::Train(a) => train_cmd(cli.seed, a)?,
        Command::Detect(a) => detect_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Ablate(a) => ablate_cmd(cli.seed, a)?,
    }
    Ok(true)
}
