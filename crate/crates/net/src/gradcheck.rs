//! Finite-difference verification of every hand-written gradient.
//!
//! Each check compares the tape gradient against central differences of the
//! reference forward function (step [`FD_STEP`]). Relative error is
//! `|a - n| / max(|a|, |n|, floor)` with `floor = FLOOR · max(1, |L|)`, so
//! coordinates whose true gradient is at round-off level are judged by
//! absolute error instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use maskdet_core::flip::flip_back_heatmap;
use maskdet_core::grid::{BBox, GridConfig, GridIndex};
use maskdet_core::loss::{self, ConsistencyMode, LossWeights, RegressionMode};
use maskdet_core::map::{FieldMap, Mask};
use maskdet_core::synth::Sample;
use maskdet_core::triplet::{pool_region, triplet_term, CellRect, TripletRegions};
use maskdet_core::{sub_seed, MASKED_FACE};

use crate::losses;
use crate::model::{Model, ModelConfig};
use crate::tape::{Tape, Var};
use crate::train::{evaluate_objective, record_objective, Objective, PreparedSample};

pub const FD_STEP: f64 = 1e-6;
/// Step for the end-to-end check. The total sums thousands of terms, so its
/// round-off is larger than a single loss's and a wider step keeps the
/// difference quotient above that noise.
pub const END_TO_END_STEP: f64 = 1e-5;
/// Smooth coordinates give nearly the same difference quotient at `h`,
/// `h/2` and `h/4` (round-off stays near 1e-5 relative); larger
/// disagreement means a ReLU or max switch lies within the step.
pub const KINK_DISAGREEMENT: f64 = 2e-5;
pub const FLOOR: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
/// Instances are resampled while any branch point lies this close.
pub const KINK_MARGIN: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 10;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    /// Coordinates skipped because a kink lies within the difference step.
    pub excluded: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance && self.instances > 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64, loss_scale: f64) -> f64 {
    let floor = FLOOR * loss_scale.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Default)]
struct Tally {
    instances: usize,
    coordinates: usize,
    excluded: usize,
    max_rel: f64,
}

impl Tally {
    fn report(self, name: &str, tolerance: f64) -> GradcheckReport {
        GradcheckReport {
            name: name.to_string(),
            instances: self.instances,
            coordinates: self.coordinates,
            excluded: self.excluded,
            max_rel_error: self.max_rel,
            tolerance,
        }
    }
}

/// Compare tape gradients w.r.t. every element of `inputs` with central
/// differences of `reference`.
fn check_maps(
    tally: &mut Tally,
    inputs: &[FieldMap],
    record: impl Fn(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[FieldMap]) -> f64,
) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.parameter([m.channels, m.height, m.width], m.data.clone())).collect();
    let out = record(&mut tape, &vars);
    let value = tape.scalar(out);
    tape.backward(out);
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].data.len()];
        let analytic = tape.grad(*v).unwrap_or(&zeros).to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let x = inputs[k].data[i];
            probe[k].data[i] = x + FD_STEP;
            let up = reference(&probe);
            probe[k].data[i] = x - FD_STEP;
            let down = reference(&probe);
            probe[k].data[i] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            tally.max_rel = tally.max_rel.max(relative_error(a, numeric, value));
            tally.coordinates += 1;
        }
    }
    tally.instances += 1;
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> FieldMap {
    FieldMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized buffer")
}

fn random_cells(rng: &mut ChaCha8Rng, h: usize, w: usize, count: usize) -> Vec<GridIndex> {
    let mut cells = Vec::new();
    while cells.len() < count {
        let c = GridIndex::new(rng.gen_range(0..h), rng.gen_range(0..w));
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    cells
}

fn random_rect(rng: &mut ChaCha8Rng, h: usize, w: usize) -> CellRect {
    let (i0, j0) = (rng.gen_range(0..h), rng.gen_range(0..w));
    CellRect { i0, i1: rng.gen_range(i0 + 1..=h), j0, j1: rng.gen_range(j0 + 1..=w) }
}

pub fn check_focal(seed: u64, instances: usize) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    let w = LossWeights::default();
    for _ in 0..instances {
        let pred = random_map(&mut rng, 2, 4, 5, 0.02, 0.98);
        let mut target = random_map(&mut rng, 2, 4, 5, 0.0, 0.95);
        let n = rng.gen_range(0..3);
        for cell in random_cells(&mut rng, 4, 5, n) {
            target.set(rng.gen_range(0..2), cell.i, cell.j, 1.0);
        }
        check_maps(
            &mut tally,
            &[pred],
            |t, v| losses::focal(t, v[0], &target, n, w.alpha, w.beta),
            |m| loss::focal_pixel_loss(&m[0], &target, n, w.alpha, w.beta).expect("shapes"),
        );
    }
    tally.report("focal", LOSS_TOLERANCE)
}

fn regression_instance(rng: &mut ChaCha8Rng, lo: f64, hi: f64, gt_lo: f64, gt_hi: f64, mode: RegressionMode) -> (FieldMap, Vec<(GridIndex, [f64; 2])>) {
    loop {
        let field = random_map(rng, 2, 4, 4, lo, hi);
        let n = rng.gen_range(1..=3);
        let targets: Vec<(GridIndex, [f64; 2])> =
            random_cells(rng, 4, 4, n).into_iter().map(|c| (c, [rng.gen_range(gt_lo..gt_hi), rng.gen_range(gt_lo..gt_hi)])).collect();
        let near_kink = targets.iter().any(|(c, gt)| {
            (0..2).any(|k| {
                let d = (field.get(k, c.i, c.j) - gt[k]).abs();
                d < KINK_MARGIN || (mode == RegressionMode::SmoothL1 && (d - 1.0).abs() < KINK_MARGIN)
            })
        });
        if !near_kink {
            return (field, targets);
        }
    }
}

fn check_regression(name: &str, seed: u64, instances: usize, range: (f64, f64), gt: (f64, f64)) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    for k in 0..instances {
        let mode = if k % 2 == 0 { RegressionMode::L1 } else { RegressionMode::SmoothL1 };
        let (field, targets) = regression_instance(&mut rng, range.0, range.1, gt.0, gt.1, mode);
        let n = targets.len();
        check_maps(
            &mut tally,
            &[field],
            |t, v| losses::regression(t, v[0], &targets, n, mode, 1.0),
            |m| loss::regression_loss_with(&m[0], &targets, n, mode, 1.0).expect("shapes"),
        );
    }
    tally.report(name, LOSS_TOLERANCE)
}

pub fn check_offset(seed: u64, instances: usize) -> GradcheckReport {
    check_regression("offset", seed, instances, (-0.5, 1.5), (0.0, 1.0))
}

pub fn check_size(seed: u64, instances: usize) -> GradcheckReport {
    check_regression("size", seed, instances, (0.0, 30.0), (4.0, 25.0))
}

fn triplet_reference(field: &FieldMap, plan: &[TripletRegions], margin: f64) -> f64 {
    plan.iter()
        .map(|t| triplet_term(&pool_region(field, &t.anchor), &pool_region(field, &t.positive), &pool_region(field, &t.negative), margin))
        .sum()
}

pub fn check_triplet(seed: u64, instances: usize) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    let margin = LossWeights::default().margin;
    let mut done = 0;
    while done < instances {
        let field = random_map(&mut rng, 3, 4, 4, -1.0, 1.0);
        let plan: Vec<TripletRegions> = (0..rng.gen_range(1..=3))
            .map(|_| TripletRegions {
                anchor: random_rect(&mut rng, 4, 4),
                positive: random_rect(&mut rng, 4, 4),
                negative: random_rect(&mut rng, 4, 4),
                anchor_class: 0,
            })
            .collect();
        let pre: Vec<f64> = plan
            .iter()
            .map(|t| {
                let [a, p, n] = [t.anchor, t.positive, t.negative].map(|r| pool_region(&field, &r));
                triplet_term(&a, &p, &n, margin + 1e6) - 1e6
            })
            .collect();
        if pre.iter().any(|v| v.abs() < KINK_MARGIN) || pre.iter().all(|&v| v <= 0.0) {
            continue;
        }
        check_maps(&mut tally, &[field], |t, v| losses::triplet(t, v[0], &plan, margin), |m| triplet_reference(&m[0], &plan, margin));
        done += 1;
    }
    tally.report("triplet", LOSS_TOLERANCE)
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let mut mask = Mask::new(h, w);
    let count = rng.gen_range(1..=h * w / 2);
    for c in random_cells(rng, h, w, count) {
        mask.set(c.i, c.j, true);
    }
    mask
}

pub fn check_consistency_cls(seed: u64, instances: usize, mode: ConsistencyMode) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    for _ in 0..instances {
        let pred = random_map(&mut rng, 2, 4, 4, 0.02, 0.98);
        let flipped = random_map(&mut rng, 2, 4, 4, 0.02, 0.98);
        let mask = random_mask(&mut rng, 4, 4);
        check_maps(
            &mut tally,
            &[pred, flipped],
            |t, v| {
                let back = t.mirror(v[1]);
                losses::consistency_cls(t, v[0], back, &mask, mode)
            },
            |m| loss::consistency_cls_loss(&m[0], &flip_back_heatmap(&m[1]), &mask, mode).expect("shapes"),
        );
    }
    let name = match mode {
        ConsistencyMode::MaskedL2 => "consistency_cls_l2",
        ConsistencyMode::BernoulliJsd => "consistency_cls_jsd",
    };
    tally.report(name, LOSS_TOLERANCE)
}

pub fn check_consistency_loc(seed: u64, instances: usize) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    for k in 0..instances {
        let pivot = if k % 2 == 0 { 0.0 } else { 0.5 };
        let maps = vec![
            random_map(&mut rng, 2, 4, 4, -1.0, 1.0),
            random_map(&mut rng, 2, 4, 4, 2.0, 20.0),
            random_map(&mut rng, 2, 4, 4, -1.0, 1.0),
            random_map(&mut rng, 2, 4, 4, 2.0, 20.0),
        ];
        let n = rng.gen_range(1..=3);
        let pairs: Vec<(GridIndex, GridIndex)> = random_cells(&mut rng, 4, 4, n).into_iter().zip(random_cells(&mut rng, 4, 4, n)).collect();
        check_maps(
            &mut tally,
            &maps,
            |t, v| losses::consistency_loc(t, v[0], v[1], v[2], v[3], &pairs, pivot),
            |m| loss::consistency_loc_loss_with(&m[0], &m[1], &m[2], &m[3], &pairs, pivot).expect("shapes"),
        );
    }
    tally.report("consistency_loc", LOSS_TOLERANCE)
}

/// A 16×16 image with one face and one masked face for the micro model.
fn micro_sample(rng: &mut ChaCha8Rng) -> Sample {
    let image = random_map(rng, 3, 16, 16, 0.0, 1.0);
    let mut boxes = Vec::new();
    for (k, x0) in [1.0, 9.0].into_iter().enumerate() {
        let (w, h) = (rng.gen_range(4.0..6.5), rng.gen_range(4.0..7.0));
        let x1 = x0 + rng.gen_range(0.0..0.5);
        let y1 = rng.gen_range(0.5..15.0 - h);
        let class = if k == 0 { 0 } else { MASKED_FACE };
        boxes.push(BBox::new(x1, y1, x1 + w, y1 + h, class).expect("valid box"));
    }
    Sample { name: "micro".into(), image, boxes }
}

/// Gradient of the full two-pass objective w.r.t. every parameter of the
/// micro model, against central differences with step [`END_TO_END_STEP`]. A
/// coordinate is excluded when halving or quartering the step changes the
/// numeric derivative by more than [`KINK_DISAGREEMENT`].
pub fn check_end_to_end(seed: u64, instances: usize) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    let grid = GridConfig::new(16, 16, 4, 2).expect("valid grid");
    let obj = Objective::default();
    for k in 0..instances {
        let mut model = Model::init(ModelConfig::micro(), sub_seed(seed, &format!("init/{k}"))).expect("valid micro config");
        // Zero biases over an all-zero region put ReLU inputs exactly on the
        // kink, where a central difference sees only one side.
        for p in model.params.iter_mut().filter(|p| p.name.ends_with(".bias")) {
            p.data.iter_mut().for_each(|b| *b += rng.gen_range(-0.1..0.1));
        }
        let sample = PreparedSample::new(&micro_sample(&mut rng), &grid).expect("valid micro sample");
        let mining = rng.gen();
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let (total, _) = record_objective(&mut tape, &model, &vars, &sample, &obj, mining).expect("micro forward");
        let value = tape.scalar(total);
        tape.backward(total);
        let eval = |m: &Model| evaluate_objective(m, &sample, &obj, mining).expect("micro forward").total;
        let mut probe = model.clone();
        for (p, v) in vars.iter().enumerate() {
            let zeros = vec![0.0; model.params[p].data.len()];
            let analytic = tape.grad(*v).unwrap_or(&zeros).to_vec();
            for (i, &a) in analytic.iter().enumerate() {
                let x = model.params[p].data[i];
                let mut diff = |h: f64| {
                    probe.params[p].data[i] = x + h;
                    let up = eval(&probe);
                    probe.params[p].data[i] = x - h;
                    let down = eval(&probe);
                    probe.params[p].data[i] = x;
                    (up - down) / (2.0 * h)
                };
                let numeric = diff(END_TO_END_STEP);
                tally.coordinates += 1;
                let smooth = [2.0, 4.0].iter().all(|&d| relative_error(numeric, diff(END_TO_END_STEP / d), value) <= KINK_DISAGREEMENT);
                if !smooth {
                    tally.excluded += 1;
                    continue;
                }
                tally.max_rel = tally.max_rel.max(relative_error(a, numeric, value));
            }
        }
        tally.instances += 1;
    }
    tally.report("end_to_end", END_TO_END_TOLERANCE)
}

/// Every check, each with its own sub-seed.
pub fn run_suite(seed: u64, instances: usize) -> Vec<GradcheckReport> {
    let s = |name: &str| sub_seed(seed, name);
    vec![
        check_focal(s("focal"), instances),
        check_offset(s("offset"), instances),
        check_size(s("size"), instances),
        check_triplet(s("triplet"), instances),
        check_consistency_cls(s("consistency_cls_l2"), instances, ConsistencyMode::MaskedL2),
        check_consistency_cls(s("consistency_cls_jsd"), instances, ConsistencyMode::BernoulliJsd),
        check_consistency_loc(s("consistency_loc"), instances),
        check_end_to_end(s("end_to_end"), instances),
    ]
}
