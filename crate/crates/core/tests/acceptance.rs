//! Acceptance suite.
//!
//! Prints one `PASS`/`FAIL` line per criterion with the measured values and
//! the pinned tolerance, then exits non-zero if any criterion outside
//! [`NON_BLOCKING`] fails. Criteria 5 to 7 and 10 share three desk-scale
//! training runs, trained once up front (about five minutes on one core).

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dima::config::RunConfig;
use dima::eval::{collides_exact, collides_on_grid, evaluate, fuse_features, mean3, round2, EvalProtocol, ProtocolKind};
use dima::geometry::{OrientedRect, Point};
use dima::language::{builtin_vocabulary, scene_qa, QaCategory};
use dima::model::{dual_decode, dual_inference, Model};
use dima::numerics::{param_grad_check, primitive_check, Array, NumericsError, ParamStore, Tape, PRIMITIVE_CASES};
use dima::planner::Trajectory;
use dima::report::Table;
use dima::surrogate::{apply_edit, edit_qa, future_loss, propose_edit, recon_loss, EditOp, FutureTargets, MaskSpec, CORRIDOR_MARGIN};
use dima::training::{
    checkpoint_path, distill_value, loss_csv_path, scene_terms, total_loss, train_stage, Checkpoint, DetachedTargets, LossTerms,
    LossWeights, Session, Stage, TrainingData,
};
use dima::world::{
    ego_behavior, generate_scene, load_dataset, save_dataset, Agent, Category, GeneratorConfig, KindMix, Motion, ScenarioKind, Scene, DT, HORIZON,
};
use dima::Error;

// Tolerances, pinned.
const PRIMITIVE_REL: f64 = 1e-4;
const FULL_LOSS_REL: f64 = 1e-3;
const GRADIENT_BUDGET_S: f64 = 60.0;
const KL_SELF: f64 = 1e-9;
const LINEARITY_ABS: f64 = 1e-12;
const FINE_GRID_M: f64 = 0.1;
const COARSE_GRID_M: f64 = 1.0;
const STAGE1_RATIO: f64 = 0.25;
const STAGE2_RATIO: f64 = 0.5;
const DISTILL_RATIO: f64 = 0.5;
const WALL_BUDGET_S: f64 = 20.0 * 60.0;
const SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN_SCENES: usize = 200;
const VAL_SCENES: usize = 100;
const LONG_TAIL_SCENES: usize = 30;
const EDIT_OPS: usize = 1000;
const MASK_RATIOS: usize = 50;

/// Criteria reported but not gating the exit status. 6 and 7 compare two
/// trained models. 4 asks a fixed grid to match exact geometry, which any
/// contact too thin to cover a cell center defeats; its line also reports
/// whether every disagreement is such a miss.
const NON_BLOCKING: [u8; 3] = [4, 6, 7];

struct Line {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: u8, name: &'static str, pass: bool, detail: String) -> Line {
    Line { id, name, pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn scratch(name: &str) -> PathBuf {
    let p = std::env::temp_dir().join(format!("dima-acceptance-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&p);
    std::fs::create_dir_all(&p).unwrap();
    p
}

fn desk(seed: u64, out: &Path) -> RunConfig {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg")).unwrap();
    RunConfig {
        seed,
        out_dir: out.to_str().unwrap().into(),
        checkpoint_every: 0,
        ..RunConfig::parse(&text).unwrap()
    }
}

// ---------------------------------------------------------------------------
// Independent geometry oracle: separating axis test on rectangle corners.

fn corners(r: &OrientedRect) -> [Point; 4] {
    let (s, c) = r.heading.sin_cos();
    let (hl, hw) = (r.length / 2.0, r.width / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(x, y)| [r.center[0] + c * x - s * y, r.center[1] + s * x + c * y])
}

fn sat_overlap(a: &OrientedRect, b: &OrientedRect) -> bool {
    let (ca, cb) = (corners(a), corners(b));
    for h in [a.heading, b.heading] {
        for axis in [[h.cos(), h.sin()], [-h.sin(), h.cos()]] {
            let proj = |pts: &[Point; 4]| {
                let d: Vec<f64> = pts.iter().map(|p| p[0] * axis[0] + p[1] * axis[1]).collect();
                (d.iter().copied().fold(f64::INFINITY, f64::min), d.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            };
            let ((a0, a1), (b0, b1)) = (proj(&ca), proj(&cb));
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
    }
    true
}

/// Overlap depth along the separating axis with the least penetration;
/// negative when the boxes are apart.
fn sat_depth(a: &OrientedRect, b: &OrientedRect) -> f64 {
    let (ca, cb) = (corners(a), corners(b));
    let mut depth = f64::INFINITY;
    for h in [a.heading, b.heading] {
        for axis in [[h.cos(), h.sin()], [-h.sin(), h.cos()]] {
            let proj = |pts: &[Point; 4]| {
                let d: Vec<f64> = pts.iter().map(|p| p[0] * axis[0] + p[1] * axis[1]).collect();
                (d.iter().copied().fold(f64::INFINITY, f64::min), d.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            };
            let ((a0, a1), (b0, b1)) = (proj(&ca), proj(&cb));
            depth = depth.min(a1.min(b1) - a0.max(b0));
        }
    }
    depth
}

/// Deepest ego-agent overlap along `pred`, or `None` without contact.
fn deepest_contact(pred: &[Point], scene: &Scene) -> Option<f64> {
    let ego = ego_pose_rects(pred, scene.ego.size);
    (1..=HORIZON)
        .flat_map(|k| scene.agents.iter().map(move |a| (k, a)))
        .filter(|(k, a)| sat_overlap(&a.rect_at(*k), &ego[*k]))
        .map(|(k, a)| sat_depth(&a.rect_at(k), &ego[k]))
        .reduce(f64::max)
}

fn ego_pose_rects(traj: &[Point], size: [f64; 2]) -> Vec<OrientedRect> {
    let mut out = vec![OrientedRect::new([0.0, 0.0], 0.0, size[0], size[1])];
    let (mut prev, mut heading) = ([0.0, 0.0], 0.0);
    for &p in traj {
        if (p[0] - prev[0]).hypot(p[1] - prev[1]) > 1e-6 {
            heading = (p[1] - prev[1]).atan2(p[0] - prev[0]);
        }
        out.push(OrientedRect::new(p, heading, size[0], size[1]));
        prev = p;
    }
    out
}

fn oracle_collides(pred: &[Point], scene: &Scene) -> bool {
    let ego = ego_pose_rects(pred, scene.ego.size);
    (1..=HORIZON).any(|k| scene.agents.iter().any(|a| sat_overlap(&a.rect_at(k), &ego[k])))
}

/// Swept ego box along the ground truth, sampled every half meter.
fn oracle_corridor(scene: &Scene) -> Vec<OrientedRect> {
    let poses = ego_pose_rects(&scene.ego.gt_traj, scene.ego.size);
    let grow = |r: OrientedRect| OrientedRect::new(r.center, r.heading, r.length + 2.0 * CORRIDOR_MARGIN, r.width + 2.0 * CORRIDOR_MARGIN);
    let mut out = vec![grow(poses[0])];
    for w in poses.windows(2) {
        let n = ((w[1].center[0] - w[0].center[0]).hypot(w[1].center[1] - w[0].center[1]) / 0.5).ceil().max(1.0) as usize;
        for i in 1..=n {
            let t = i as f64 / n as f64;
            let c = [
                w[0].center[0] + t * (w[1].center[0] - w[0].center[0]),
                w[0].center[1] + t * (w[1].center[1] - w[0].center[1]),
            ];
            out.push(grow(OrientedRect::new(c, w[1].heading, w[1].length, w[1].width)));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Shared desk runs.

struct Datasets {
    train: TrainingData,
    val: Vec<Scene>,
    long_tail: Vec<Scene>,
}

fn datasets() -> Datasets {
    let cfg = GeneratorConfig::default();
    let held_out = KindMix::default().exclude(ScenarioKind::ThreePointTurn).unwrap();
    let train = held_out.generate(TRAIN_SCENES, 1, &cfg).unwrap();
    let val = held_out.generate(VAL_SCENES, 2, &cfg).unwrap();
    let long_tail = KindMix::parse("three-point-turn=1").unwrap().generate(LONG_TAIL_SCENES, 3, &cfg).unwrap();
    let grid = desk(0, Path::new("unused")).model_config().grid;
    Datasets {
        train: TrainingData::new(train, &grid).unwrap(),
        val,
        long_tail,
    }
}

struct SeedRun {
    seed: u64,
    joint: Model,
    baseline: Model,
    stage1_csv: String,
    stage2_csv: String,
    train_s: f64,
}

fn train_seed(seed: u64, data: &TrainingData) -> SeedRun {
    let dir = scratch(&format!("seed{seed}"));
    let run = desk(seed, &dir.join("joint"));
    let t0 = Instant::now();
    train_stage(&run, Stage::One, false, data).unwrap();
    let joint = train_stage(&run, Stage::Two, false, data).unwrap().model;
    let base_run = RunConfig {
        mllm: false,
        out_dir: dir.join("baseline").to_str().unwrap().into(),
        ..run.clone()
    };
    let stage1 = Checkpoint::load(&checkpoint_path(&run, Stage::One)).unwrap();
    let mut base = Session::stage2(&base_run, &stage1, true).unwrap();
    base.run(data, |_, _| Ok(())).unwrap();
    SeedRun {
        seed,
        joint,
        baseline: base.model,
        stage1_csv: std::fs::read_to_string(loss_csv_path(&run, Stage::One)).unwrap(),
        stage2_csv: std::fs::read_to_string(loss_csv_path(&run, Stage::Two)).unwrap(),
        train_s: t0.elapsed().as_secs_f64(),
    }
}

fn ave_all(model: &Model, scenes: &[Scene]) -> f64 {
    let refs: Vec<&Scene> = scenes.iter().collect();
    let kind = ProtocolKind::Standardized;
    evaluate(&refs, "held-out", kind, EvalProtocol::preset(kind), |s| Ok(model.plan(s)?.0)).unwrap().ave_all
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let t = Table::parse(csv).unwrap();
    let c = t.column(name).unwrap();
    t.rows.iter().map(|r| r[c].parse().unwrap()).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn tail_ratio(v: &[f64]) -> f64 {
    mean(&v[v.len().saturating_sub(100)..]) / v[0]
}

// ---------------------------------------------------------------------------

fn criterion_1() -> Line {
    let t0 = Instant::now();
    let mut worst_primitive = (0.0f64, "");
    for (which, name) in PRIMITIVE_CASES.iter().enumerate() {
        for seed in 0..20 {
            let e = primitive_check(which, seed).unwrap().max_rel_error;
            if e > worst_primitive.0 {
                worst_primitive = (e, name);
            }
        }
    }

    let run = RunConfig {
        grid_resolution: 8.0,
        patch: 2,
        d: 16,
        heads: 2,
        ff_hidden: 16,
        encoder_layers: 1,
        planner_blocks: 1,
        n_q: 4,
        d_l: 16,
        lm_layers: 1,
        lm_heads: 2,
        lm_ff: 32,
        ..RunConfig::default()
    };
    let mut scene = generate_scene(11, ScenarioKind::Straight, &GeneratorConfig::default()).unwrap();
    scene.agents.truncate(1);
    let data = TrainingData::new(vec![scene], &run.model_config().grid).unwrap();
    let model = Model::new(run.model_config(), run.seed).unwrap();
    let pinned = DetachedTargets::compute(&model, &model.store, &data, 0).unwrap();
    let weights = LossWeights::from_run(&run);
    let f = |tape: &mut Tape, store: &ParamStore| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let contract = |e: Error| NumericsError::Contract(e.to_string());
        let (terms, _) = scene_terms(tape, &model, store, &run, true, &data, 0, &mut rng, Some(&pinned)).map_err(contract)?;
        total_loss(tape, &terms, &weights, true).map_err(contract)
    };
    let ids: Vec<_> = model.store.ids().collect();
    let full = param_grad_check(&model.store, &ids, 2, 1e-5, f).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst_primitive.0 < PRIMITIVE_REL && full.max_rel_error < FULL_LOSS_REL && secs < GRADIENT_BUDGET_S;
    line(
        1,
        "gradient integrity",
        pass,
        format!(
            "primitives max rel {:.1e} ({}) < {PRIMITIVE_REL:.0e}; total loss max rel {:.1e} over {} entries < {FULL_LOSS_REL:.0e}; {secs:.1} s < {GRADIENT_BUDGET_S} s",
            worst_primitive.0, worst_primitive.1, full.max_rel_error, full.checked
        ),
    )
}

fn criterion_2() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut kl_max = 0.0f64;
    let mut surrogate_exact = true;
    let mut lin_max = 0.0f64;
    for _ in 0..100 {
        let rows = rng.gen_range(1..4);
        let cols = rng.gen_range(2..12);
        let logits = Array::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-4.0..4.0)).collect()).unwrap();
        let mut t = Tape::new(0);
        let x = t.constant(logits.clone());
        let p = t.softmax(x).unwrap();
        let kl = t.kl_divergence(p, p).unwrap();
        kl_max = kl_max.max(t.value(kl).item().abs());
        kl_max = kl_max.max(distill_value(&logits, &logits, rng.gen_range(0.5..4.0)).unwrap().abs());

        let a = t.constant(logits.clone());
        let b = t.constant(logits.clone());
        let r = recon_loss(&mut t, a, b, None).unwrap();
        let mut rows_masked: Vec<usize> = (0..rows).filter(|_| rng.gen_bool(0.5)).collect();
        if rows_masked.is_empty() {
            rows_masked.push(0);
        }
        let rm = recon_loss(&mut t, a, b, Some(&rows_masked)).unwrap();
        let targets = FutureTargets {
            next: logits.clone(),
            next2: logits.clone(),
        };
        let fl = future_loss(&mut t, a, b, &targets).unwrap();
        surrogate_exact &= t.value(r).item() == 0.0 && t.value(fl).item() == 0.0;
        surrogate_exact &= t.value(rm).item() == 0.0;

        let values: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..10.0)).collect();
        let v: Vec<_> = values.iter().map(|&x| t.constant(Array::scalar(x).unwrap())).collect();
        let terms = LossTerms {
            planning: v[0],
            llm: Some(v[1]),
            recon: Some(v[2]),
            future: Some(v[3]),
            distill: Some(v[4]),
        };
        let w: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..3.0)).collect();
        let weights = LossWeights {
            planning: w[0],
            llm: w[1],
            recon: w[2],
            future: w[3],
            distill: w[4],
        };
        let total = total_loss(&mut t, &terms, &weights, true).unwrap();
        let oracle: f64 = w.iter().zip(&values).map(|(a, b)| a * b).sum();
        lin_max = lin_max.max((t.value(total).item() - oracle).abs());
    }
    let pass = kl_max < KL_SELF && surrogate_exact && lin_max < LINEARITY_ABS;
    line(
        2,
        "loss identities",
        pass,
        format!("max |kl(p,p)| {kl_max:.1e} < {KL_SELF:.0e}; recon/future zero on identical inputs: {surrogate_exact}; linearity max dev {lin_max:.1e} < {LINEARITY_ABS:.0e} over 100 draws"),
    )
}

fn criterion_3() -> Line {
    let a = round2(mean3([0.20, 0.53, 1.10]));
    let b = round2(mean3([0.18, 0.36, 0.61]));
    line(3, "metric arithmetic", a == 0.61 && b == 0.38, format!("Ave(0.20, 0.53, 1.10) = {a:.2} (0.61); Ave(0.18, 0.36, 0.61) = {b:.2} (0.38)"))
}

fn criterion_4(model: &Model) -> Line {
    let cfg = GeneratorConfig::default();
    let scenes = KindMix::default().generate(1000, 4, &cfg).unwrap();
    let mut disagree_model = 0;
    let mut disagree_cv = 0;
    let mut library_vs_oracle = 0;
    let mut collisions = 0;
    let mut worst_miss = 0.0f64;
    let mut false_hits = 0;
    for s in &scenes {
        let planned = model.plan(s).unwrap().0;
        let v = s.ego.current_speed();
        let cv = Trajectory::new((1..=HORIZON).map(|k| [v * DT * k as f64, 0.0]).collect()).unwrap();
        for (pred, counter) in [(&planned, &mut disagree_model), (&cv, &mut disagree_cv)] {
            let exact = oracle_collides(pred.waypoints(), s);
            collisions += usize::from(exact);
            library_vs_oracle += usize::from(collides_exact(pred, s) != exact);
            let grid = collides_on_grid(pred, s, FINE_GRID_M);
            if grid != exact {
                *counter += 1;
                match deepest_contact(pred.waypoints(), s) {
                    Some(d) if !grid => worst_miss = worst_miss.max(d),
                    _ => false_hits += 1,
                }
            }
        }
    }

    let mut sliver = generate_scene(0, ScenarioKind::Straight, &cfg).unwrap();
    sliver.agents = vec![Agent::constant_velocity(0, Category::Car, [20.0, 2.0], [6.0, 1.65], 0.0, 0.0)];
    let through = Trajectory::new((1..=HORIZON).map(|k| [2.0 * k as f64, 0.0]).collect()).unwrap();
    let coarse_miss = oracle_collides(through.waypoints(), &sliver) && !collides_on_grid(&through, &sliver, COARSE_GRID_M);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let stress = scenes
        .iter()
        .filter(|s| {
            let wp: Vec<Point> = s.ego.gt_traj.iter().map(|p| [p[0] + rng.gen_range(-2.0..2.0), p[1] + rng.gen_range(-2.0..2.0)]).collect();
            let pred = Trajectory::new(wp).unwrap();
            collides_on_grid(&pred, s, FINE_GRID_M) != oracle_collides(pred.waypoints(), s)
        })
        .count();

    let pass = disagree_model == 0 && disagree_cv == 0 && library_vs_oracle == 0 && coarse_miss;
    line(
        4,
        "collision fidelity",
        pass,
        format!(
            "{FINE_GRID_M} m grid vs exact on 1000 scenes: {disagree_model} disagreements (trained planner), {disagree_cv} (constant velocity), {collisions} collisions; library exact vs oracle {library_vs_oracle}; coarse {COARSE_GRID_M} m misses the constructed sliver: {coarse_miss}; {false_hits} disagreements are grid hits without contact, deepest missed overlap {worst_miss:.3} m [info: ±2 m perturbed ground truth disagrees on {stress}/1000]"
        ),
    )
}

fn criterion_5(runs: &[SeedRun], wall_s: f64) -> Line {
    let s1: Vec<f64> = runs.iter().map(|r| tail_ratio(&column(&r.stage1_csv, "planning"))).collect();
    let ratio = |name| median(runs.iter().map(|r| tail_ratio(&column(&r.stage2_csv, name))).collect());
    let (recon, future, llm) = (ratio("recon"), ratio("future"), ratio("llm"));
    let s1m = median(s1);
    let pass = s1m < STAGE1_RATIO && recon < STAGE2_RATIO && future < STAGE2_RATIO && llm < STAGE2_RATIO && wall_s < WALL_BUDGET_S;
    line(
        5,
        "training effectiveness",
        pass,
        format!(
            "3-seed median last-100/initial: stage-1 planning {s1m:.3} < {STAGE1_RATIO}; stage-2 recon {recon:.3}, future {future:.3}, llm {llm:.3} < {STAGE2_RATIO}; wall {:.0} s < {WALL_BUDGET_S} s",
            wall_s
        ),
    )
}

fn criterion_6(runs: &[SeedRun], data: &Datasets) -> Line {
    let mut per_seed = Vec::new();
    let mut gaps = Vec::new();
    let mut distill = Vec::new();
    for r in runs {
        let (j, b) = (ave_all(&r.joint, &data.val), ave_all(&r.baseline, &data.val));
        per_seed.push(format!("seed {} {j:.3}/{b:.3}", r.seed));
        gaps.push(j - b);
        let d = column(&r.stage2_csv, "distill");
        distill.push(mean(&d[d.len() - 100..]) / mean(&d[..100]));
    }
    let gap = median(gaps);
    let dr = median(distill);
    line(
        6,
        "distillation direction",
        gap <= 0.0 && dr < DISTILL_RATIO,
        format!(
            "held-out Ave_all joint/baseline: {}; median gap {gap:+.3} <= 0; distill last-100/first-100 median {dr:.3} < {DISTILL_RATIO}",
            per_seed.join(", ")
        ),
    )
}

fn criterion_7(runs: &[SeedRun], data: &Datasets) -> Line {
    let joint: Vec<f64> = runs.iter().map(|r| ave_all(&r.joint, &data.long_tail)).collect();
    let base: Vec<f64> = runs.iter().map(|r| ave_all(&r.baseline, &data.long_tail)).collect();
    let per_seed: Vec<String> = runs.iter().zip(joint.iter().zip(&base)).map(|(r, (j, b))| format!("seed {} {j:.3}/{b:.3}", r.seed)).collect();
    let (mj, mb) = (median(joint), median(base));
    line(
        7,
        "zero-shot long tail",
        mj <= mb,
        format!(
            "three-point-turn Ave_all joint/baseline ({} unseen scenes): {}; median {mj:.3} <= {mb:.3}",
            data.long_tail.len(),
            per_seed.join(", ")
        ),
    )
}

fn criterion_8() -> Line {
    let cfg = GeneratorConfig::default();
    let extent = cfg.extent;
    let vocab = builtin_vocabulary();
    let (mut ops, mut adds, mut infeasible_ops, mut answer_mismatch, mut skipped) = (0, 0, 0, 0, 0);
    let mut seed = 0u64;
    while ops < EDIT_OPS {
        let s = generate_scene(7_000 + seed, ScenarioKind::ALL[(seed % 6) as usize], &cfg).unwrap();
        seed += 1;
        let op = match propose_edit(&s, extent, seed) {
            Ok(op) => op,
            Err(Error::Infeasible(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => panic!("{e}"),
        };
        ops += 1;
        let edited = apply_edit(&s, &op).unwrap();
        let ok = match &op {
            EditOp::Add { agent } => {
                adds += 1;
                let r0 = agent.rect_at(0);
                let ego = OrientedRect::new([0.0, 0.0], 0.0, s.ego.size[0], s.ego.size[1]);
                let clear = !sat_overlap(&r0, &ego) && s.agents.iter().all(|o| !sat_overlap(&r0, &o.rect_at(0)));
                let small = agent.size[0] <= 2.0 * s.ego.size[0] && agent.size[1] <= 2.0 * s.ego.size[1];
                let in_map = (0..=HORIZON).all(|k| corners(&agent.rect_at(k)).iter().all(|p| p[0].abs() <= extent + 1e-9 && p[1].abs() <= extent + 1e-9));
                clear && small && in_map && edited.agents.len() == s.agents.len() + 1
            }
            EditOp::Remove { agent } => {
                s.agents.iter().any(|a| a.id == agent.id) && edited.agents.iter().all(|a| a.id != agent.id) && edited.agents.len() + 1 == s.agents.len()
            }
        };
        infeasible_ops += usize::from(!ok);
        let qa = edit_qa(&op, &edited).unwrap();
        qa.ids(vocab).unwrap();
        let corridor = oracle_corridor(&edited);
        let blocks = (0..=HORIZON).any(|k| corridor.iter().any(|c| sat_overlap(c, &op.agent().rect_at(k))));
        answer_mismatch += usize::from((qa.answer[0] == "yes") != blocks);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mask_wrong = 0;
    for _ in 0..MASK_RATIOS {
        let per_mille: usize = rng.gen_range(200..=400);
        let n: usize = rng.gen_range(1..500);
        let spec = MaskSpec::new(per_mille as f64 / 1000.0, rng.gen()).unwrap();
        mask_wrong += usize::from(spec.indices(n).len() != (per_mille * n).div_ceil(1000));
    }
    let pass = infeasible_ops == 0 && answer_mismatch == 0 && mask_wrong == 0;
    line(
        8,
        "surrogate and edit correctness",
        pass,
        format!(
            "{ops} edits ({adds} adds, {} removes, {skipped} scenes without a feasible edit): {infeasible_ops} infeasible, {answer_mismatch} answers off the corridor oracle; {mask_wrong}/{MASK_RATIOS} wrong mask counts",
            ops - adds
        ),
    )
}

fn criterion_9(data: &Datasets) -> Line {
    let dir = scratch("determinism");
    let run = RunConfig {
        stage1_steps: 30,
        stage2_steps: 15,
        stage2_warmup: 5,
        checkpoint_every: 10,
        ..desk(5, &dir.join("run"))
    };
    let small = TrainingData::new(data.train.scenes[..20].to_vec(), &run.model_config().grid).unwrap();
    let artifacts = || {
        let _ = std::fs::remove_dir_all(&run.out_dir);
        train_stage(&run, Stage::One, false, &small).unwrap();
        train_stage(&run, Stage::Two, false, &small).unwrap();
        [
            loss_csv_path(&run, Stage::One),
            loss_csv_path(&run, Stage::Two),
            checkpoint_path(&run, Stage::One),
            checkpoint_path(&run, Stage::Two),
        ]
        .map(|p| std::fs::read(p).unwrap())
    };
    let (a, b) = (artifacts(), artifacts());
    let reproducible = a == b;

    let ck = Checkpoint::from_bytes(&a[3]).unwrap();
    let round_trip = ck.to_bytes().unwrap() == a[3];

    let path = dir.join("train.jsonl");
    save_dataset(&data.train.scenes, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    let path2 = dir.join("again.jsonl");
    save_dataset(&back, &path2).unwrap();
    let dataset_exact = back == data.train.scenes && std::fs::read(&path).unwrap() == std::fs::read(&path2).unwrap();

    let bytes: usize = a.iter().map(Vec::len).sum();
    line(
        9,
        "determinism and persistence",
        reproducible && round_trip && dataset_exact,
        format!("two runs byte-identical over {bytes} bytes of CSVs and checkpoints: {reproducible}; checkpoint round trip exact: {round_trip}; {}-scene dataset round trip exact: {dataset_exact}", back.len()),
    )
}

fn criterion_10(model: &Model, val: &[Scene]) -> Line {
    let mut idempotent = true;
    let mut differs = 0;
    for s in val {
        let (plan, feats) = model.plan(s).unwrap();
        let f = feats.penultimate.data().to_vec();
        idempotent &= fuse_features(&f, &f).unwrap() == f;

        let mut tape = Tape::inference();
        let x = tape.constant(Array::matrix(1, f.len(), f.clone()).unwrap());
        let a = model.planner.decode(&mut tape, &model.store, x).unwrap();
        let b = model.branch.decode_ego(&mut tape, &model.store, x).unwrap();
        let expect: Vec<f64> = tape.value(a).data().iter().zip(tape.value(b).data()).map(|(p, q)| 0.5 * (p + q)).collect();
        idempotent &= dual_decode(model, model, &f, &f).unwrap().to_array().data() == expect.as_slice();

        let dual = dual_inference(model, model, s).unwrap();
        let gap = dual
            .waypoints()
            .iter()
            .zip(plan.waypoints())
            .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
            .fold(0.0, f64::max);
        differs += usize::from(gap > 1e-9);
    }
    line(
        10,
        "dual inference contract",
        idempotent && differs >= 1,
        format!("identical-feature fusion exact on {} scenes: {idempotent}; dual differs from vision-only on {differs}/{} held-out scenes (>= 1)", val.len(), val.len()),
    )
}

/// Behavior answers of the trained language branch on held-out scenes where the ego waits.
fn ask_stopped(model: &Model, val: &[Scene]) -> String {
    let stopped: Vec<&Scene> = val.iter().filter(|s| ego_behavior(s).motion == Motion::Stopped).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let hits = stopped
        .iter()
        .filter(|s| {
            let q = scene_qa(s, QaCategory::Behavior, &mut rng).unwrap().question_text();
            model.ask(s, &q, 16).unwrap().contains("stopped")
        })
        .count();
    format!("ask: behavior answers mention \"stopped\" on {hits}/{} held-out stopped-ego scenes", stopped.len())
}

fn main() {
    let mut lines = vec![criterion_1(), criterion_2(), criterion_3(), criterion_8()];

    let data = datasets();
    let t0 = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| train_seed(s, &data.train)).collect();
    let wall = t0.elapsed().as_secs_f64();
    eprintln!(
        "trained {} seeds in {wall:.0} s ({})",
        runs.len(),
        runs.iter().map(|r| format!("{:.0} s", r.train_s)).collect::<Vec<_>>().join(", ")
    );

    lines.push(criterion_4(&runs[0].joint));
    lines.push(criterion_5(&runs, wall));
    lines.push(criterion_6(&runs, &data));
    lines.push(criterion_7(&runs, &data));
    lines.push(criterion_9(&data));
    lines.push(criterion_10(&runs[0].joint, &data.val));
    lines.sort_by_key(|l| l.id);

    let mut blocking = Vec::new();
    for l in &lines {
        let tag = if l.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {:>2} {:<30} {}", l.id, l.name, l.detail);
        if !l.pass && !NON_BLOCKING.contains(&l.id) {
            blocking.push(l.id);
        }
    }
    println!("[info] {}", ask_stopped(&runs[0].joint, &data.val));
    let passed = lines.iter().filter(|l| l.pass).count();
    println!("acceptance: {passed}/{} criteria pass", lines.len());
    if !blocking.is_empty() {
        eprintln!("failing contract criteria: {blocking:?}");
        std::process::exit(1);
    }
}
