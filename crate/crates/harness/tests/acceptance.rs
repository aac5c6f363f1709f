//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits non-zero if any fails. Criteria run sequentially
//! so wall-clock measurements are not disturbed by other tests.

use std::time::Instant;

use harness::bundle::ModelBundle;
use harness::config::ExperimentConfig;
use harness::eval::{evaluate, MetricsReport, Protocol};
use harness::train::train;
use partflow::codec::{encode, CodecParams, LatentGrid};
use partflow::flowcore::{cfm_loss_and_grad, euler_sample, interpolate, sample_noise, FlowError, LossWeight, VelocityModel};
use partflow::partdecode::{
    decode_full, decode_guided, decode_interactive, iou_matrix, match_parts, CLICK_COUNTS, DEFAULT_DELTA_C,
};
use partflow::segdit::{InitScheme, ModelConfig, ModelParams, PointEmbed, PointPrompt, TaskCondition};
use partflow::shapeforge::{
    decode_guidance_map, encode_guidance_map, make_full_target, make_interactive_target, normalized_center, render_guidance,
    sample_dataset, ShapeRecord, View,
};
use partflow::voxcore::{decode_grid, encode_grid, Coord, PartLabeling, SparseVoxelGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOY_CONFIG: &str = include_str!("../../../configs/toy.cfg");

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

// ---------------------------------------------------------------- criterion 1

/// A 26-voxel two-part shape on an 8^3 grid with varied colors.
fn tiny_shape() -> (SparseVoxelGrid, PartLabeling) {
    let mut coords: Vec<Coord> = Vec::new();
    let mut raw = Vec::new();
    for i in 1..4u16 {
        for j in 1..4u16 {
            for k in 1..3u16 {
                coords.push([i, j, k]);
                raw.push(0u32);
            }
        }
    }
    for i in 4..6u16 {
        for j in 2..4u16 {
            for k in 2..4u16 {
                coords.push([i, j, k]);
                raw.push(1);
            }
        }
    }
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by_key(|&i| coords[i]);
    let coords: Vec<Coord> = order.iter().map(|&i| coords[i]).collect();
    let raw: Vec<u32> = order.iter().map(|&i| raw[i]).collect();
    let colors: Vec<[f32; 3]> =
        coords.iter().map(|c| [c[0] as f32 / 8.0 - 0.3, 0.5 - c[1] as f32 / 8.0, (c[2] as f32 * 0.7).sin()]).collect();
    (SparseVoxelGrid::from_colors(8, coords, &colors).unwrap(), PartLabeling::compacted(&raw).unwrap())
}

struct Sample {
    y: LatentGrid,
    eps: LatentGrid,
    z: LatentGrid,
    cond: TaskCondition,
    t: f64,
}

impl Sample {
    fn y_t(&self) -> LatentGrid {
        interpolate(&self.y, &self.eps, self.t).unwrap()
    }
}

fn batch_loss(params: &ModelParams, batch: &[Sample]) -> f64 {
    batch
        .iter()
        .map(|s| {
            let v = params.forward(&s.y_t(), &s.z, &s.cond, s.t).unwrap();
            cfm_loss_and_grad(&v, &s.y, &s.eps, s.t, &LossWeight::Uniform).unwrap().0
        })
        .sum()
}

/// Checks every parameter; returns (worst normalized error, parameter count).
fn check_every_parameter(cfg: ModelConfig, batch: &[Sample]) -> (f64, usize) {
    let mut params = ModelParams::init(cfg, 3, InitScheme::Dense).unwrap();
    let mut grads = vec![0.0; params.count()];
    for s in batch {
        let (v, tape) = params.forward_recorded(&s.y_t(), &s.z, &s.cond, s.t).unwrap();
        let (_, adj) = cfm_loss_and_grad(&v, &s.y, &s.eps, s.t, &LossWeight::Uniform).unwrap();
        tape.backward_into(&params, &adj, &mut grads).unwrap();
    }
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..params.count() {
        let orig = params.as_slice()[i];
        params.as_mut_slice()[i] = orig + h;
        let lp = batch_loss(&params, batch);
        params.as_mut_slice()[i] = orig - h;
        let lm = batch_loss(&params, batch);
        params.as_mut_slice()[i] = orig;
        let num = (lp - lm) / (2.0 * h);
        worst = worst.max((grads[i] - num).abs() / (1e-8 + 1e-5 * grads[i].abs().max(num.abs())));
    }
    (worst, params.count())
}

fn criterion_1() -> Outcome {
    let (grid, labels) = tiny_shape();
    let codec = CodecParams::identity();
    let z = encode(&codec, &grid).unwrap();
    let palette = partflow::voxcore::sample_palette_default(2, 7).unwrap();
    let full = make_full_target(&grid, &labels, &palette).unwrap();
    let inter = make_interactive_target(&grid, &labels, 1).unwrap();
    let map = render_guidance(&grid, &full, View::PosZ, 16, 16).unwrap();
    let clicks = PointPrompt::new([[4u16, 2, 2], [5, 3, 3], [1, 1, 1]].iter().map(|&c| normalized_center(c, 8)).collect()).unwrap();
    let sample = |target: &SparseVoxelGrid, cond: TaskCondition, t: f64, seed: u64| {
        let y = encode(&codec, target).unwrap();
        Sample { eps: sample_noise(&y, seed), y, z: z.clone(), cond, t }
    };
    let base = ModelConfig { d_model: 32, blocks: 1, heads: 2, ff_ratio: 2, patch_size: 8, freq_dim: 16, ..ModelConfig::default() };
    // Label points with cross-attention, then explicit points with the unguided task.
    let runs = [
        (
            ModelConfig { point_embed: PointEmbed::Label, ..base.clone() },
            vec![sample(&inter, TaskCondition::Interactive(clicks.clone()), 0.31, 1), sample(&full, TaskCondition::GuidedFull(map), 0.74, 2)],
        ),
        (
            ModelConfig { point_embed: PointEmbed::Explicit, ..base },
            vec![sample(&inter, TaskCondition::Interactive(clicks), 0.52, 3), sample(&full, TaskCondition::Full, 0.18, 4)],
        ),
    ];
    let mut worst = 0.0f64;
    let mut count = 0;
    for (cfg, batch) in &runs {
        let (w, n) = check_every_parameter(cfg.clone(), batch);
        worst = worst.max(w);
        count += n;
    }
    Outcome::new(worst <= 1.0, format!("{count} parameters, {} voxels, worst |a-n|/(1e-8+1e-5*max) = {worst:.3}", grid.len()))
}

// ---------------------------------------------------------------- criterion 2

/// Velocity of the straight path from the known start noise to the target.
struct ConstantVelocity {
    target: LatentGrid,
    noise: LatentGrid,
}

impl VelocityModel for ConstantVelocity {
    fn velocity(&self, y_t: &LatentGrid, _: &LatentGrid, _: &TaskCondition, _: f64) -> Result<LatentGrid, FlowError> {
        Ok(y_t.with_values(self.noise.values().iter().zip(self.target.values()).map(|(e, y)| e - y).collect()))
    }
}

fn criterion_2() -> Outcome {
    let shapes = sample_dataset(4, 12, &partflow::shapeforge::GenConfig { resolution: 16, ..Default::default() }).unwrap();
    let codec = CodecParams::identity();
    let mut worst = 0.0f64;
    for (i, s) in shapes.iter().enumerate() {
        let target = encode(&codec, &make_full_target(&s.grid, &s.labels, &s.palettes().unwrap()[2]).unwrap()).unwrap();
        let seed = 100 + i as u64;
        let oracle = ConstantVelocity { noise: sample_noise(&target, seed), target: target.clone() };
        for steps in [1, 4, 12, 25] {
            let out = euler_sample(&oracle, &target, &TaskCondition::Full, steps, seed).unwrap();
            for (a, b) in out.values().iter().zip(target.values()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Outcome::new(worst <= 1e-6, format!("max per-channel error {worst:.2e} over steps 1/4/12/25"))
}

// ---------------------------------------------------------------- criterion 3

fn brute_force(m: &[Vec<f64>], ng: usize) -> f64 {
    fn go(m: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == m.len() {
            *best = best.max(acc);
            return;
        }
        go(m, row + 1, used, acc, best);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                go(m, row + 1, used, acc + m[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = 0.0;
    go(m, 0, &mut vec![false; ng], 0.0, &mut best);
    best / ng as f64
}

fn permutations(n: usize) -> Vec<Vec<u32>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, (n - 1) as u32);
            out.push(q);
        }
    }
    out
}

fn relabel(l: &PartLabeling, sigma: &[u32]) -> PartLabeling {
    PartLabeling::new(l.labels().iter().map(|&v| sigma[v as usize]).collect()).unwrap()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let perms: Vec<Vec<Vec<u32>>> = (0..=6).map(permutations).collect();
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for _ in 0..500 {
        let n = rng.random_range(6..60);
        let (kp, kg) = (rng.random_range(1..=6u32), rng.random_range(1..=6u32));
        let pred = PartLabeling::compacted(&(0..n).map(|_| rng.random_range(0..kp)).collect::<Vec<_>>()).unwrap();
        let gt = PartLabeling::compacted(&(0..n).map(|_| rng.random_range(0..kg)).collect::<Vec<_>>()).unwrap();
        let got = match_parts(&pred, &gt).unwrap().mean_iou;
        worst = worst.max((got - brute_force(&iou_matrix(&pred, &gt).unwrap(), gt.num_parts() as usize)).abs());
        for sigma in &perms[pred.num_parts() as usize] {
            worst = worst.max((match_parts(&relabel(&pred, sigma), &gt).unwrap().mean_iou - got).abs());
            checked += 1;
        }
        for sigma in &perms[gt.num_parts() as usize] {
            worst = worst.max((match_parts(&pred, &relabel(&gt, sigma)).unwrap().mean_iou - got).abs());
            checked += 1;
        }
    }
    Outcome::new(worst <= 1e-12, format!("500 pairs, {checked} permuted matchings, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let gen = partflow::shapeforge::GenConfig { resolution: 16, ..Default::default() };
    let shapes = sample_dataset(200, 44, &gen).unwrap();
    let mut failures = Vec::new();
    let mut palettes = 0;
    for s in &shapes {
        for part in 0..s.labels.num_parts() {
            let t = make_interactive_target(&s.grid, &s.labels, part).unwrap();
            if decode_interactive(&t) != s.labels.mask(part) {
                failures.push(format!("{} interactive part {part}", s.id));
            }
        }
        for (j, palette) in s.palettes().unwrap().iter().enumerate() {
            let t = make_full_target(&s.grid, &s.labels, palette).unwrap();
            if decode_guided(&t, palette) != s.labels {
                failures.push(format!("{} guided palette {j}", s.id));
            }
            if palette.min_separation() >= 2.0 * DEFAULT_DELTA_C {
                palettes += 1;
                if decode_full(&t, DEFAULT_DELTA_C) != s.labels {
                    failures.push(format!("{} full palette {j}", s.id));
                }
            }
        }
    }
    Outcome::new(
        failures.is_empty() && palettes > 0,
        format!("200 shapes, {palettes} well-separated palettes, {} mismatches {:?}", failures.len(), failures.iter().take(3).collect::<Vec<_>>()),
    )
}

// ------------------------------------------------------------ criteria 5 to 9

struct Trained {
    cfg: ExperimentConfig,
    bundle: ModelBundle,
    train_set: Vec<ShapeRecord>,
    held_out: Vec<ShapeRecord>,
    train_seconds: f64,
}

fn train_toy() -> Trained {
    let cfg = ExperimentConfig::parse(TOY_CONFIG).expect("toy config");
    let train_set = sample_dataset(cfg.data.count, cfg.data.seed, &cfg.data.gen).unwrap();
    let held_out = sample_dataset(cfg.data.holdout, cfg.data.seed.wrapping_add(1 << 32), &cfg.data.gen).unwrap();
    let start = Instant::now();
    let (bundle, _) = train(&cfg.train, cfg.model.clone(), &train_set, CodecParams::identity()).unwrap();
    Trained { cfg, bundle, train_set, held_out, train_seconds: start.elapsed().as_secs_f64() }
}

fn iou_at(r: &MetricsReport, n: usize) -> f64 {
    r.iou_at.as_ref().unwrap().iter().find(|p| p.0 == n).unwrap().1
}

fn fmt_iou_at(r: &MetricsReport) -> String {
    r.iou_at.as_ref().unwrap().iter().map(|(n, v)| format!("@{n} {v:.1}")).collect::<Vec<_>>().join(", ")
}

fn eval(tr: &Trained, shapes: &[ShapeRecord], protocol: Protocol, steps: usize) -> MetricsReport {
    evaluate(&tr.bundle, shapes, protocol, steps, tr.cfg.eval.seed, &tr.cfg.eval).unwrap()
}

fn criterion_5(tr: &Trained) -> Outcome {
    let report = eval(tr, &tr.train_set, Protocol::IouAtN, 12);
    let (at1, at10) = (iou_at(&report, 1), iou_at(&report, 10));
    Outcome::new(
        at1 >= 85.0 && at10 >= 95.0,
        format!("{} training shapes, trained {:.0}s: IoU@1 {at1:.1} (>= 85), IoU@10 {at10:.1} (>= 95)", tr.train_set.len(), tr.train_seconds),
    )
}

fn criterion_6(tr: &Trained, held: &MetricsReport) -> Outcome {
    let values: Vec<f64> = CLICK_COUNTS.iter().map(|&n| iou_at(held, n)).collect();
    let monotone = values.windows(2).all(|w| w[1] >= w[0] - 2.0);
    Outcome::new(monotone, format!("{} held-out shapes: {}", tr.held_out.len(), fmt_iou_at(held)))
}

fn criterion_7(tr: &Trained) -> Outcome {
    let full = eval(tr, &tr.held_out, Protocol::Full, 12).full_iou.unwrap();
    let guided = eval(tr, &tr.held_out, Protocol::GuidedFull, 12).full_iou.unwrap();
    Outcome::new(guided >= full + 5.0, format!("guided {guided:.1} vs unguided {full:.1} (margin {:+.1}, need +5)", guided - full))
}

fn criterion_8(tr: &Trained, held: &MetricsReport) -> Outcome {
    let sweep = [1, 4, 8, 12, 25];
    let times: Vec<f64> = sweep.iter().map(|&s| eval(tr, &tr.held_out, Protocol::Full, s).timing.mean_seconds_per_shape).collect();
    let times_ok = times.windows(2).all(|w| w[1] >= w[0]);
    let (twelve, one) = (iou_at(held, 10), iou_at(&eval(tr, &tr.held_out, Protocol::IouAtN, 1), 10));
    Outcome::new(
        times_ok && twelve >= one - 2.0,
        format!(
            "seconds/shape {}; IoU@10 12 steps {twelve:.1} vs 1 step {one:.1}",
            sweep.iter().zip(&times).map(|(s, t)| format!("{s}:{t:.4}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

/// Outputs for two tasks with identical token inputs differ, and become
/// identical once the task embedding is made task-independent.
fn task_surgery() -> bool {
    let (grid, labels) = tiny_shape();
    let codec = CodecParams::identity();
    let z = encode(&codec, &grid).unwrap();
    let y = encode(&codec, &make_interactive_target(&grid, &labels, 0).unwrap()).unwrap();
    let y_t = interpolate(&y, &sample_noise(&y, 5), 0.6).unwrap();
    let cfg = ModelConfig { d_model: 32, blocks: 2, heads: 2, patch_size: 8, freq_dim: 16, ..ModelConfig::default() };
    let mut params = ModelParams::init(cfg, 8, InitScheme::Dense).unwrap();
    let empty = TaskCondition::Interactive(PointPrompt::new(vec![]).unwrap());
    let differ = params.forward(&y_t, &z, &empty, 0.6).unwrap() != params.forward(&y_t, &z, &TaskCondition::Full, 0.6).unwrap();
    let w2 = params.layout().slot("task.w2").unwrap();
    params.get_mut(w2).iter_mut().for_each(|v| *v = 0.0);
    let same = params.forward(&y_t, &z, &empty, 0.6).unwrap() == params.forward(&y_t, &z, &TaskCondition::Full, 0.6).unwrap();
    differ && same
}

fn criterion_9(shared: bool, bundle: &ModelBundle) -> Outcome {
    // The only task-dependent input is the shared task-embedding MLP.
    let per_task = bundle.flow.layout().entries.iter().filter(|(n, _)| ["interactive", "full", "guided"].iter().any(|t| n.contains(t))).count();
    let surgery = task_surgery();
    Outcome::new(
        shared && per_task == 0 && surgery,
        format!("one checkpoint for criteria 5-8: {shared}; per-task tensors: {per_task}; task-embedding surgery: {surgery}"),
    )
}

// --------------------------------------------------------------- criterion 10

fn criterion_10(tr: &Trained) -> Outcome {
    let shapes: Vec<ShapeRecord> = tr.train_set.iter().take(6).cloned().collect();
    let mut cfg = tr.cfg.train.clone();
    cfg.max_steps = 25;
    let (a, log_a) = train(&cfg, tr.cfg.model.clone(), &shapes, CodecParams::identity()).unwrap();
    let (_, log_b) = train(&cfg, tr.cfg.model.clone(), &shapes, CodecParams::identity()).unwrap();
    let curves = log_a == log_b && a.step == cfg.max_steps;

    let dir = tempfile::tempdir().unwrap();
    tr.bundle.save(dir.path()).unwrap();
    let loaded = ModelBundle::load(dir.path()).unwrap();
    let held = &tr.held_out[..4];
    let e = &tr.cfg.eval;
    let reports = [Protocol::IouAtN, Protocol::Full, Protocol::GuidedFull].iter().all(|&p| {
        let before = evaluate(&tr.bundle, held, p, 4, 3, e).unwrap();
        let after = evaluate(&loaded, held, p, 4, 3, e).unwrap();
        before.same_metrics(&after)
    }) && loaded == tr.bundle;

    let mut formats = true;
    for s in tr.train_set.iter().chain(&tr.held_out) {
        let bytes = encode_grid(&s.grid, Some(&s.labels)).unwrap();
        let (g, l) = decode_grid(&bytes).unwrap();
        formats &= g == s.grid && l.as_ref() == Some(&s.labels) && encode_grid(&g, l.as_ref()).unwrap() == bytes;
        let target = make_full_target(&s.grid, &s.labels, &s.palettes().unwrap()[0]).unwrap();
        let map = render_guidance(&s.grid, &target, View::PosZ, 64, 64).unwrap();
        let gbytes = encode_guidance_map(&map);
        let back = decode_guidance_map(&gbytes).unwrap();
        formats &= back == map && encode_guidance_map(&back) == gbytes;
    }
    Outcome::new(
        curves && reports && formats,
        format!("identical loss curves: {curves}; save/load/evaluate identical: {reports}; SVG1/GMAP bit-exact: {formats}"),
    )
}

fn run(results: &mut Vec<(u8, bool)>, id: u8, name: &str, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = f();
    let status = if outcome.pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2} {status} {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), outcome.detail);
    results.push((id, outcome.pass));
}

fn main() {
    let mut results = Vec::new();
    run(&mut results, 1, "gradient correctness", criterion_1);
    run(&mut results, 2, "flow-exactness oracle", criterion_2);
    run(&mut results, 3, "matching oracle", criterion_3);
    run(&mut results, 4, "clean-target inverses", criterion_4);

    let trained = train_toy();
    run(&mut results, 5, "toy overfit, interactive", || criterion_5(&trained));
    let held = eval(&trained, &trained.held_out, Protocol::IouAtN, 12);
    run(&mut results, 6, "click monotonicity", || criterion_6(&trained, &held));
    run(&mut results, 7, "guidance helps", || criterion_7(&trained));
    run(&mut results, 8, "steps and latency", || criterion_8(&trained, &held));
    let shared = results.iter().filter(|r| (5..=8).contains(&r.0)).all(|r| r.1);
    run(&mut results, 9, "unified model", || criterion_9(shared, &trained.bundle));
    run(&mut results, 10, "determinism and persistence", || criterion_10(&trained));

    let failed: Vec<u8> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
