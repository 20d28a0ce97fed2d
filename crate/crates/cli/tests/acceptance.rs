//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints exactly one PASS/FAIL line regardless of output capture; the
//! process fails if any criterion fails.

use std::time::{Duration, Instant};

use maskdet_cli::experiment::{ablate, run_experiment, ExperimentSpec};
use maskdet_core::decode::Detection;
use maskdet_core::flip::flip_back_regression_about;
use maskdet_core::loss::{consistency_cls_loss, consistency_loc_loss, ConsistencyMode};
use maskdet_core::synth::{generate_dataset, SceneSpec};
use maskdet_core::{
    decode, encode_targets, flip_back_heatmap, gaussian_sigma, iou, match_detections, precision_recall, BBox, DecodeConfig, FieldMap,
    GridConfig, GridIndex, Mask, MatchCounts, PredictionPack,
};
use maskdet_net::gradcheck::run_suite;
use maskdet_net::model::{cbam_channel, cbam_spatial};
use maskdet_net::{train, CbamOrder, Model, ModelConfig, PreparedSample, Tape, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAINING_SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn main() {
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "gradient suite", gradient_suite),
        (2, "encoder exactness", encoder_exactness),
        (3, "encode/decode round trip", round_trip),
        (4, "flip-equivariance zero point", flip_zero_point),
        (5, "toy training", toy_training),
        (6, "ablation direction", ablation_direction),
        (7, "regression-mode ablation", regression_ablation),
        (8, "metric correctness", metric_correctness),
        (9, "determinism", determinism),
        (10, "CBAM ordering flag", cbam_modes),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !result.passed {
            failed += 1;
        }
        let verdict = if result.passed { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {verdict} [{name}] {} ({:.1}s)", result.detail, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = run_suite(7, 10);
    let elapsed = start.elapsed();
    let failing: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| format!("{}={:.2e}", r.name, r.max_rel_error)).collect();
    let worst = reports.iter().map(|r| format!("{} {:.1e}", r.name, r.max_rel_error)).collect::<Vec<_>>().join(", ");
    let enough = reports.iter().all(|r| r.instances >= 10);
    let passed = failing.is_empty() && enough && elapsed <= Duration::from_secs(60);
    outcome(passed, format!("{} checks in {:.1}s; max rel errors: {worst}; failing: {failing:?}", reports.len(), elapsed.as_secs_f64()))
}

/// Worst IoU between a `w × h` box and every box whose edges move by
/// `-r`, `0` or `+r`.
fn worst_iou(w: f64, h: f64, r: f64) -> f64 {
    let truth = BBox { x1: 0.0, y1: 0.0, x2: w, y2: h, class_id: 0 };
    let mut worst = f64::INFINITY;
    for code in 0..81 {
        let mut c = code;
        let mut d = [0.0; 4];
        for slot in &mut d {
            *slot = (c % 3) as f64 - 1.0;
            c /= 3;
        }
        let moved = BBox { x1: d[0] * r, y1: d[1] * r, x2: w + d[2] * r, y2: h + d[3] * r, class_id: 0 };
        let v = if moved.x2 <= moved.x1 || moved.y2 <= moved.y1 { 0.0 } else { iou(&truth, &moved) };
        worst = worst.min(v);
    }
    worst
}

fn brute_force_radius(w: f64, h: f64) -> f64 {
    let mut r = 0.0;
    while worst_iou(w, h, r + 0.001) >= 0.7 {
        r += 0.001;
    }
    r
}

fn encoder_exactness() -> Outcome {
    let grid = GridConfig::default();
    let scenes = generate_dataset(&SceneSpec { seed: 41, ..SceneSpec::default() }, 30).unwrap();
    let s = grid.stride as f64;
    let (mut worst_value, mut worst_sigma, mut centers_ok) = (0.0f64, 0.0f64, true);
    for scene in &scenes {
        let t = encode_targets(&scene.boxes, &grid).unwrap();
        for k in 0..grid.num_classes {
            for i in 0..t.heatmap.height {
                for j in 0..t.heatmap.width {
                    // Direct evaluation: the largest Gaussian of this class at the cell.
                    let expected = t
                        .objects
                        .iter()
                        .filter(|o| o.class_id == k)
                        .map(|o| {
                            let sigma = gaussian_sigma(o.bbox.width() / s, o.bbox.height() / s).unwrap();
                            let d2 = (i as f64 - o.cell.i as f64).powi(2) + (j as f64 - o.cell.j as f64).powi(2);
                            (-d2 / (2.0 * sigma * sigma)).exp()
                        })
                        .fold(0.0, f64::max);
                    worst_value = worst_value.max((t.heatmap.get(k, i, j) - expected).abs());
                }
            }
        }
        for o in &t.objects {
            centers_ok &= t.heatmap.get(o.class_id, o.cell.i, o.cell.j) == 1.0;
            let (w, h) = (o.bbox.width() / s, o.bbox.height() / s);
            worst_sigma = worst_sigma.max((gaussian_sigma(w, h).unwrap() - brute_force_radius(w, h) / 3.0).abs());
        }
    }
    let passed = worst_value <= 1e-12 && centers_ok && worst_sigma <= 0.02;
    outcome(passed, format!("max heatmap error {worst_value:.1e}, centers exactly 1: {centers_ok}, max sigma gap {worst_sigma:.4}"))
}

fn round_trip() -> Outcome {
    let grid = GridConfig::default();
    let scenes = generate_dataset(&SceneSpec { seed: 77, ..SceneSpec::default() }, 100).unwrap();
    let mut counts = MatchCounts::new(grid.num_classes);
    let (mut worst_iou_seen, mut classes_ok, mut objects) = (1.0f64, true, 0);
    for scene in &scenes {
        let dets = decode(&PredictionPack::ideal(&encode_targets(&scene.boxes, &grid).unwrap()), &DecodeConfig::default(), &grid).unwrap();
        for gt in &scene.boxes {
            objects += 1;
            let best = dets.iter().max_by(|a, b| iou(&a.bbox, gt).total_cmp(&iou(&b.bbox, gt)));
            match best {
                Some(d) => {
                    worst_iou_seen = worst_iou_seen.min(iou(&d.bbox, gt));
                    classes_ok &= d.bbox.class_id == gt.class_id;
                }
                None => worst_iou_seen = 0.0,
            }
        }
        counts.accumulate(&match_detections(&dets, &scene.boxes, 0.5, grid.num_classes));
    }
    let report = precision_recall(&counts, 0.5);
    let passed = worst_iou_seen >= 1.0 - 1e-9 && classes_ok && report.min_precision() == 1.0 && report.min_recall() == 1.0;
    outcome(
        passed,
        format!(
            "{objects} objects, worst IoU 1-{:.1e}, classes exact: {classes_ok}, P={} R={}",
            1.0 - worst_iou_seen,
            report.min_precision(),
            report.min_recall()
        ),
    )
}

fn flip_zero_point() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (5, 6);
    let (mut worst_zero, mut min_without) = (0.0f64, f64::INFINITY);
    for _ in 0..50 {
        let rand_map = |rng: &mut ChaCha8Rng, c: usize, lo: f64, hi: f64| {
            FieldMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
        };
        let heat = rand_map(&mut rng, 2, 0.0, 1.0);
        let off = rand_map(&mut rng, 2, 0.05, 1.0);
        let size = rand_map(&mut rng, 2, 2.0, 30.0);
        let pairs: Vec<_> = (0..3)
            .map(|_| {
                let p = GridIndex::new(rng.gen_range(0..h), rng.gen_range(0..w));
                (p, GridIndex::new(p.i, w - 1 - p.j))
            })
            .collect();
        let mut mask = Mask::new(h, w);
        for &(p, _) in &pairs {
            mask.set(p.i, p.j, true);
        }
        // Predictions the mirrored image would get from an equivariant model.
        let heat_flip = heat.mirrored();
        let (off_flip, size_flip) = flip_back_regression_about(&off, &size, 0.0);
        let back = flip_back_heatmap(&heat_flip);
        for mode in [ConsistencyMode::MaskedL2, ConsistencyMode::BernoulliJsd] {
            worst_zero = worst_zero.max(consistency_cls_loss(&heat, &back, &mask, mode).unwrap().abs());
        }
        worst_zero = worst_zero.max(consistency_loc_loss(&off, &size, &off_flip, &size_flip, &pairs).unwrap().abs());
        // Same construction with the horizontal negation left out.
        let without = consistency_loc_loss(&off, &size, &off.mirrored(), &size.mirrored(), &pairs).unwrap();
        min_without = min_without.min(without);
    }
    let passed = worst_zero <= 1e-12 && min_without > 0.0;
    outcome(passed, format!("50 instances: max loss with negation {worst_zero:.1e}, min loc loss without negation {min_without:.3}"))
}

fn toy_training() -> Outcome {
    let mut lines = Vec::new();
    let mut passed = true;
    for seed in TRAINING_SEEDS {
        let r = run_experiment(&ExperimentSpec { seed, ..ExperimentSpec::default() }).unwrap();
        let c = &r.report.classes;
        let ok = r.report.min_precision() >= 0.9 && r.report.min_recall() >= 0.9 && r.elapsed <= Duration::from_secs(600);
        passed &= ok;
        lines.push(format!(
            "seed {seed}: face P/R {:.3}/{:.3}, masked P/R {:.3}/{:.3}, {:.0}s",
            c[0].precision,
            c[0].recall,
            c[1].precision,
            c[1].recall,
            r.elapsed.as_secs_f64()
        ));
    }
    outcome(passed, lines.join("; "))
}

fn confuser_heavy() -> ExperimentSpec {
    ExperimentSpec { scene: SceneSpec { confuser_prob: 0.6, ..SceneSpec::default() }, ..ExperimentSpec::default() }
}

thread_local! {
    static ABLATION: std::cell::RefCell<Option<maskdet_cli::experiment::AblationTable>> = const { std::cell::RefCell::new(None) };
}

fn ablation_table() -> maskdet_cli::experiment::AblationTable {
    ABLATION.with(|cell| {
        cell.borrow_mut()
            .get_or_insert_with(|| {
                ablate(&confuser_heavy(), &TRAINING_SEEDS, |name, r| {
                    eprintln!("  ablation {name} seed {}: mean F1 {:.3} ({:.0}s)", r.seed, r.report.mean_f1(), r.elapsed.as_secs_f64())
                })
                .unwrap()
            })
            .clone()
    })
}

fn ablation_direction() -> Outcome {
    let table = ablation_table();
    println!("{}", table.render());
    let names: Vec<&str> = table.losses.iter().map(|r| r.name.as_str()).collect();
    let rows_ok = names == ["center-only", "+triplet", "+consistency", "+both"] && table.losses.iter().all(|r| r.runs.len() == 3);
    let (center, both) = (table.losses[0].mean_f1(), table.losses[3].mean_f1());
    outcome(rows_ok && both >= center, format!("mean F1 over 3 seeds: center-only {center:.4}, +both {both:.4}; rows {names:?}"))
}

fn regression_ablation() -> Outcome {
    let table = ablation_table();
    let names: Vec<&str> = table.regression.iter().map(|r| r.name.as_str()).collect();
    let complete = names == ["L1", "SmoothL1"]
        && table.regression.iter().all(|r| r.runs.len() == 3 && r.runs.iter().all(|x| x.best_loss.is_finite()));
    // Both rows share data, seeds and every setting except the regression penalty.
    let l1 = &table.regression[0].runs[0];
    let sl1 = &table.regression[1].runs[0];
    let (a, b) = (l1.outcome.as_ref().unwrap(), sl1.outcome.as_ref().unwrap());
    let same_shape = a.log.len() == b.log.len() && a.log[0].loss.focal == b.log[0].loss.focal && a.log[0].loss.offset != b.log[0].loss.offset;
    outcome(
        complete && same_shape,
        format!(
            "mean F1: L1 {:.4}, SmoothL1 {:.4}; first-step focal equal and offset terms differ: {same_shape}",
            table.regression[0].mean_f1(),
            table.regression[1].mean_f1()
        ),
    )
}

fn det(x: f64, class_id: usize, score: f64) -> Detection {
    Detection { bbox: BBox { x1: x, y1: 0.0, x2: x + 10.0, y2: 10.0, class_id }, score }
}

fn metric_correctness() -> Outcome {
    let gts: Vec<BBox> = (0..9).map(|n| det(20.0 * n as f64, 0, 1.0).bbox).collect();
    let mut dets: Vec<Detection> = (0..9).map(|n| det(20.0 * n as f64, 0, 0.9)).collect();
    dets.push(det(500.0, 0, 0.5));
    let r = precision_recall(&match_detections(&dets, &gts, 0.5, 2), 0.5);
    let nine_one = r.classes[0].tp == 9 && r.classes[0].fp == 1 && (r.classes[0].precision - 0.9).abs() < 1e-15 && r.classes[0].recall == 1.0;

    let gt = [det(0.0, 1, 1.0).bbox];
    let dup = [det(0.0, 1, 0.9), det(0.5, 1, 0.8)];
    let r = precision_recall(&match_detections(&dup, &gt, 0.5, 2), 0.5);
    let duplicate = r.classes[1].tp == 1 && r.classes[1].fp == 1 && r.classes[1].fn_ == 0;

    let wrong_class = [det(0.0, 0, 0.9)];
    let r = precision_recall(&match_detections(&wrong_class, &gt, 0.5, 2), 0.5);
    let class_aware = r.classes[0].fp == 1 && r.classes[1].fn_ == 1;

    outcome(nine_one && duplicate && class_aware, format!("TP9/FP1 -> 0.9: {nine_one}; duplicate -> 1 TP + 1 FP: {duplicate}; class-aware: {class_aware}"))
}

fn determinism() -> Outcome {
    let spec = SceneSpec { seed: 12, ..SceneSpec::default() };
    let data_same = generate_dataset(&spec, 16).unwrap() == generate_dataset(&spec, 16).unwrap();
    let grid = GridConfig::default();
    let samples = generate_dataset(&spec, 16).unwrap();
    let prepared = PreparedSample::prepare_all(&samples, &grid).unwrap();
    let cfg = TrainConfig { iterations: 12, seed: 5, ..TrainConfig::default() };
    let run = || train(Model::init(ModelConfig::default(), 5).unwrap(), cfg.clone(), &prepared, |_| {}).unwrap();
    let (a, b) = (run(), run());
    let logs_same = a.log == b.log && a.log.len() >= 10;
    let bits = |o: &maskdet_net::TrainOutcome| -> Vec<u64> { o.log.iter().map(|r| r.loss.total.to_bits()).collect() };
    let loose = DecodeConfig { score_threshold: 0.05, ..DecodeConfig::default() };
    let dets = |m: &Model| -> Vec<Vec<Detection>> { samples.iter().map(|s| decode(&m.predict(&s.image).unwrap(), &loose, &grid).unwrap()).collect() };
    let (da, db) = (dets(&a.last), dets(&b.last));
    let dets_same = da == db && da.iter().any(|d| !d.is_empty());
    outcome(
        data_same && logs_same && bits(&a) == bits(&b) && dets_same,
        format!("datasets identical: {data_same}; {}-step loss logs identical: {logs_same}; detections identical: {dets_same}", a.log.len()),
    )
}

fn cbam_modes() -> Outcome {
    // Zero attention weights give sigma(0) = 0.5 everywhere, halving the input.
    let mut tape = Tape::new();
    let values: Vec<f64> = (0..4 * 3 * 5).map(|n| (n as f64 * 0.37).sin()).collect();
    let x = tape.constant([4, 3, 5], values.clone());
    let mlp = [tape.constant([2, 4, 1], vec![0.0; 8]), tape.constant([2, 1, 1], vec![0.0; 2]), tape.constant([4, 2, 1], vec![0.0; 8]), tape.constant([4, 1, 1], vec![0.0; 4])];
    let ch = cbam_channel(&mut tape, x, mlp);
    let conv = [tape.constant([1, 2 * 9, 1], vec![0.0; 18]), tape.constant([1, 1, 1], vec![0.0])];
    let sp = cbam_spatial(&mut tape, x, conv, 3);
    let half = |v: &[f64]| v.iter().zip(&values).all(|(a, b)| (a - 0.5 * b).abs() < 1e-15);
    let identities = half(tape.value(ch)) && half(tape.value(sp));

    let samples = generate_dataset(&SceneSpec { seed: 3, ..SceneSpec::default() }, 4).unwrap();
    let grid = GridConfig::default();
    let prepared = PreparedSample::prepare_all(&samples, &grid).unwrap();
    let mut shapes = Vec::new();
    let mut ran = true;
    for cbam in [CbamOrder::ChannelThenSpatial, CbamOrder::SpatialThenChannel, CbamOrder::Off] {
        let model = Model::init(ModelConfig { cbam, ..ModelConfig::default() }, 1).unwrap();
        let cfg = TrainConfig { iterations: 2, batch_size: 2, ..TrainConfig::default() };
        let out = train(model, cfg, &prepared, |_| {}).unwrap();
        let pred = out.last.predict(&samples[0].image).unwrap();
        ran &= decode(&pred, &DecodeConfig::default(), &grid).is_ok() && out.log.iter().all(|r| r.loss.total.is_finite());
        shapes.push([pred.heatmap.shape(), pred.offsets.shape(), pred.sizes.shape(), pred.embeddings.shape()]);
    }
    let same_shapes = shapes.windows(2).all(|w| w[0] == w[1]);
    outcome(identities && ran && same_shapes, format!("zero-weight halving: {identities}; cs/sc/off train and decode: {ran}; output shapes equal: {same_shapes}"))
}
