use dima::encoder::Encoder;
use dima::geometry::{OrientedRect, Point};
use dima::model::ModelConfig;
use dima::numerics::{Array, NumericsError, ParamStore, Tape};
use dima::surrogate::*;
use dima::world::*;
use dima::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene(seed: u64, kind: ScenarioKind) -> Scene {
    generate_scene(seed, kind, &GeneratorConfig::default()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    Array::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn mse(a: &Array, b: &Array) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[test]
fn quarter_of_thirty_two_tokens_masks_eight() {
    let spec = MaskSpec::new(0.25, 3).unwrap();
    assert_eq!(spec.indices(32).len(), 8);
    assert_eq!(spec.indices(32), MaskSpec::new(0.25, 3).unwrap().indices(32));
    for bad in [0.1, 0.41, f64::NAN] {
        assert!(matches!(MaskSpec::new(bad, 0), Err(Error::Config(_))));
    }
}

proptest! {
    #[test]
    fn mask_count_is_the_ceiling_of_ratio_times_rows(percent in 20u64..=40, n in 1usize..300, seed in 0u64..1000) {
        let spec = MaskSpec::new(percent as f64 / 100.0, seed).unwrap();
        let idx = spec.indices(n);
        let expect = (percent as usize * n).div_ceil(100);
        prop_assert_eq!(idx.len(), expect);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
    }
}

#[test]
fn masking_touches_only_the_sampled_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let masker = Masker::new(&mut store, 8, &mut rng).unwrap();
    let embed = store.get(store.id("surrogate.mask").unwrap()).clone();
    let input = random(&mut rng, 40, 8);
    let mut tape = Tape::new(0);
    let b = tape.constant(input.clone());
    let (masked, idx) = masker.apply(&mut tape, &store, b, &MaskSpec::new(0.3, 9).unwrap()).unwrap();
    assert_eq!(idx.len(), 12);
    let out = tape.value(masked);
    for r in 0..40 {
        if idx.contains(&r) {
            assert_eq!(out.row(r), embed.data());
        } else {
            assert_eq!(out.row(r), input.row(r));
        }
    }
    let bad = MaskSpec { ratio: 0.5, seed: 0 };
    assert!(matches!(masker.apply(&mut tape, &store, b, &bad), Err(Error::Config(_))));
}

#[test]
fn reconstruction_loss_closed_forms_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random(&mut rng, 16, 6);
    let mut tape = Tape::inference();
    let t = tape.constant(b.clone());
    let same = tape.constant(b.clone());
    let l = recon_loss(&mut tape, same, t, None).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    let shifted = Array::new(b.shape().to_vec(), b.data().iter().map(|v| v + 1.0).collect()).unwrap();
    let s = tape.constant(shifted);
    let l = recon_loss(&mut tape, s, t, None).unwrap();
    assert!((tape.value(l).item() - 1.0).abs() < 1e-12);

    let other = random(&mut rng, 16, 6);
    let o = tape.constant(other.clone());
    let l = recon_loss(&mut tape, o, t, None).unwrap();
    assert!((tape.value(l).item() - mse(&other, &b)).abs() < 1e-12);

    let rows = [1usize, 5, 11];
    let pick = |a: &Array| Array::from_rows(&rows.iter().map(|&r| a.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
    let l = recon_loss(&mut tape, o, t, Some(&rows)).unwrap();
    assert!((tape.value(l).item() - mse(&pick(&other), &pick(&b))).abs() < 1e-12);

    let wrong = tape.constant(random(&mut rng, 15, 6));
    for rows in [None, Some(&[0usize][..])] {
        let err = recon_loss(&mut tape, wrong, t, rows).unwrap_err();
        assert!(matches!(err, Error::Numerics(NumericsError::Dimension(_))), "{err}");
    }
}

#[test]
fn future_loss_is_additive() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let targets = FutureTargets {
        next: random(&mut rng, 8, 4),
        next2: random(&mut rng, 8, 4),
    };
    let mut tape = Tape::inference();
    let a = tape.constant(targets.next.clone());
    let b = tape.constant(targets.next2.clone());
    let l = future_loss(&mut tape, a, b, &targets).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    let off = Array::new(vec![8, 4], targets.next2.data().iter().map(|v| v - 1.0).collect()).unwrap();
    let c = tape.constant(off);
    let l = future_loss(&mut tape, a, c, &targets).unwrap();
    assert!((tape.value(l).item() - 1.0).abs() < 1e-12);

    let p1 = random(&mut rng, 8, 4);
    let p2 = random(&mut rng, 8, 4);
    let expect = mse(&p1, &targets.next) + mse(&p2, &targets.next2);
    let (x, y) = (tape.constant(p1), tape.constant(p2));
    let l = future_loss(&mut tape, x, y, &targets).unwrap();
    assert!((tape.value(l).item() - expect).abs() < 1e-12);

    let wrong = tape.constant(random(&mut rng, 4, 4));
    assert!(future_loss(&mut tape, wrong, y, &targets).is_err());
}

fn encoder() -> (ModelConfig, ParamStore, Encoder) {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
    (cfg, store, enc)
}

fn bev_of(enc: &Encoder, store: &ParamStore, s: &Scene, grid: &GridSpec) -> Array {
    let mut tape = Tape::inference();
    let b = enc.bev(&mut tape, store, &rasterize_bev(s, grid).unwrap()).unwrap();
    tape.value(b).clone()
}

#[test]
fn static_world_has_static_future_tokens() {
    let (cfg, store, enc) = encoder();
    let mut s = scene(4, ScenarioKind::Straight);
    for a in &mut s.agents {
        let p = a.position_at(0);
        *a = Agent::constant_velocity(a.id, a.category, a.size, p, a.heading, 0.0);
    }
    let t = future_targets(&enc, &store, &frame_window(&s), &cfg.grid).unwrap();
    let now = bev_of(&enc, &store, &s, &cfg.grid);
    assert_eq!(t.next, now);
    assert_eq!(t.next2, now);
    assert!(matches!(
        future_targets(&enc, &store, &frame_window(&s)[..2], &cfg.grid),
        Err(Error::Contract(_))
    ));
}

#[test]
fn future_targets_carry_no_gradient() {
    let (cfg, store, enc) = encoder();
    let s = scene(8, ScenarioKind::Overtake);
    let targets = future_targets(&enc, &store, &frame_window(&s), &cfg.grid).unwrap();
    let mut tape = Tape::new(0);
    let p1 = tape.leaf(Array::zeros(&[64, 32]));
    let p2 = tape.leaf(Array::zeros(&[64, 32]));
    let l = future_loss(&mut tape, p1, p2, &targets).unwrap();
    let grads = tape.backward(l).unwrap();
    assert!(grads.params().is_empty());
    assert!(grads.get(p1).is_some() && grads.get(p2).is_some());
}

#[test]
fn moving_agents_change_the_tokens_over_cells_they_cross() {
    let (cfg, store, enc) = encoder();
    let s = (0..50)
        .map(|i| scene(i, ScenarioKind::Overtake))
        .find(|s| s.agents.iter().any(|a| a.speed > 2.0))
        .unwrap();
    let frames = frame_window(&s);
    let t = future_targets(&enc, &store, &frames, &cfg.grid).unwrap();
    let now = bev_of(&enc, &store, &s, &cfg.grid);
    let g0 = rasterize_bev(&frames[0], &cfg.grid).unwrap();
    let g1 = rasterize_bev(&frames[1], &cfg.grid).unwrap();
    let (cells, patch) = (g0.size, cfg.patch);
    let side = cells / patch;
    let mut changed = 0;
    for r in 0..cells {
        for c in 0..cells {
            if (0..CHANNELS).any(|ch| g0.get(r, c, ch) != g1.get(r, c, ch)) {
                let token = (r / patch) * side + c / patch;
                assert_ne!(t.next.row(token), now.row(token), "token {token}");
                changed += 1;
            }
        }
    }
    assert!(changed > 0);
}

/// Independent rectangle overlap: an edge crossing or a contained corner.
fn overlap_oracle(a: &OrientedRect, b: &OrientedRect) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    let cross = |o: Point, p: Point, q: Point| (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0]);
    let seg = |p1: Point, p2: Point, q1: Point, q2: Point| {
        let d1 = cross(q1, q2, p1);
        let d2 = cross(q1, q2, p2);
        let d3 = cross(p1, p2, q1);
        let d4 = cross(p1, p2, q2);
        (d1 * d2 <= 0.0) && (d3 * d4 <= 0.0)
    };
    for i in 0..4 {
        for j in 0..4 {
            if seg(ca[i], ca[(i + 1) % 4], cb[j], cb[(j + 1) % 4]) {
                return true;
            }
        }
    }
    let inside = |r: &OrientedRect, p: Point| {
        let (s, c) = r.heading.sin_cos();
        let d = [p[0] - r.center[0], p[1] - r.center[1]];
        let lx = c * d[0] + s * d[1];
        let ly = -s * d[0] + c * d[1];
        lx.abs() <= r.length / 2.0 && ly.abs() <= r.width / 2.0
    };
    inside(b, ca[0]) || inside(a, cb[0])
}

#[test]
fn proposed_additions_are_feasible_on_a_thousand_scenes() {
    let extent = GridSpec::default().extent;
    let mut adds = 0;
    for seed in 0..1000u64 {
        let s = scene(seed, ScenarioKind::ALL[(seed % 6) as usize]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op = match propose_add(&s, extent, &mut rng) {
            Ok(op) => op,
            Err(Error::Infeasible(_)) => continue,
            Err(e) => panic!("{e}"),
        };
        adds += 1;
        let a = op.agent();
        assert!(a.size[0] <= 2.0 * s.ego.size[0] && a.size[1] <= 2.0 * s.ego.size[1]);
        let p = a.position_at(0);
        assert!(p[0].hypot(p[1]) <= PLACEMENT_RADIUS + 1e-9);
        for k in 0..=HORIZON {
            let q = a.position_at(k);
            assert!(q[0].abs() <= extent + 1e-9 && q[1].abs() <= extent + 1e-9, "seed {seed} step {k}");
        }
        let rect = a.rect_at(0);
        let ego = OrientedRect::new([0.0, 0.0], 0.0, s.ego.size[0], s.ego.size[1]);
        assert!(!overlap_oracle(&rect, &ego), "seed {seed}");
        for other in &s.agents {
            assert!(!overlap_oracle(&rect, &other.rect_at(0)), "seed {seed} agent {}", other.id);
        }
        let edited = apply_edit(&s, &op).unwrap();
        edited.validate().unwrap();
    }
    assert!(adds > 900, "only {adds} feasible additions");
}

fn packed_scene() -> Scene {
    let mut s = scene(0, ScenarioKind::Straight);
    s.map = vec![MapPolyline {
        id: 0,
        kind: PolylineKind::LaneCenter,
        points: vec![[-12.0, 0.0], [12.0, 0.0]],
    }];
    s.agents = [-8.0, 8.0]
        .iter()
        .enumerate()
        .map(|(i, &x)| Agent::constant_velocity(i as u32, Category::Truck, [9.0, 2.4], [x, 0.0], 0.0, 0.0))
        .collect();
    s
}

#[test]
fn saturated_lanes_make_additions_infeasible() {
    let s = packed_scene();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(propose_add(&s, 16.0, &mut rng), Err(Error::Infeasible(_))));
    for seed in 0..20 {
        assert_eq!(propose_edit(&s, 16.0, seed).unwrap().kind(), EditKind::Remove);
    }
}

#[test]
fn add_then_remove_restores_the_scene() {
    let s = scene(17, ScenarioKind::TurnLeft);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let op = propose_add(&s, 16.0, &mut rng).unwrap();
    let added = apply_edit(&s, &op).unwrap();
    assert_eq!(added.agents.len(), s.agents.len() + 1);
    let new = added.agents.last().unwrap().clone();
    let back = apply_edit(&added, &EditOp::Remove { agent: new.clone() }).unwrap();
    assert_eq!(back, s);
    let err = apply_edit(&back, &EditOp::Remove { agent: new }).unwrap_err();
    assert!(matches!(err, Error::NotFound(_)));
}

fn swept_oracle(scene: &Scene, agent: &Agent) -> bool {
    let corridor = ego_corridor(scene);
    (0..=HORIZON).any(|k| corridor.iter().any(|c| overlap_oracle(c, &agent.rect_at(k))))
}

#[test]
fn edit_answers_follow_the_corridor() {
    let mut s = scene(2, ScenarioKind::Straight);
    s.agents.clear();
    let far_behind = Agent::constant_velocity(0, Category::Car, [4.5, 1.9], [-12.0, 0.0], 0.0, 0.0);
    let op = EditOp::Add { agent: far_behind };
    let edited = apply_edit(&s, &op).unwrap();
    let qa = edit_qa(&op, &edited).unwrap();
    assert!(qa.answer_text().contains("does not affect"), "{}", qa.answer_text());
    assert!(qa.question_text().contains("to the back of"));

    let s = scene(3, ScenarioKind::Straight);
    let reach = s.ego.gt_traj[HORIZON - 1][0];
    assert!(reach > 6.0);
    let mut blocked = s.clone();
    blocked.agents = vec![Agent::constant_velocity(0, Category::Truck, [8.0, 2.4], [reach / 2.0, 0.0], 0.0, 0.0)];
    let op = EditOp::Remove {
        agent: blocked.agents[0].clone(),
    };
    let edited = apply_edit(&blocked, &op).unwrap();
    let qa = edit_qa(&op, &edited).unwrap();
    assert!(qa.answer_text().contains("can proceed"), "{}", qa.answer_text());
    assert!(qa.question.contains(&"truck".to_string()));
}

#[test]
fn edit_answers_agree_with_an_independent_overlap_oracle() {
    let vocab = dima::language::builtin_vocabulary();
    for seed in 0..300u64 {
        let s = scene(seed, ScenarioKind::ALL[(seed % 6) as usize]);
        let op = match propose_edit(&s, 16.0, seed) {
            Ok(op) => op,
            Err(Error::Infeasible(_)) => continue,
            Err(e) => panic!("{e}"),
        };
        let edited = apply_edit(&s, &op).unwrap();
        let qa = edit_qa(&op, &edited).unwrap();
        qa.ids(vocab).unwrap();
        let affects = swept_oracle(&edited, op.agent());
        let says = qa.answer[0] == "yes";
        assert_eq!(says, affects, "seed {seed}: {}", qa.answer_text());
        assert!(qa.question.contains(&op.agent().category.name().to_string()));
    }
}

#[test]
fn edit_loss_sees_only_the_edited_agents() {
    let mut s = scene(3, ScenarioKind::Straight);
    s.agents.clear();
    let path: Vec<Point> = (1..=HORIZON).map(|k| [2.0 * k as f64, 0.0]).collect();
    s.ego.gt_traj = path.clone();
    let pred = Array::from_rows(&path.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap();
    let loss = |scene: &Scene| {
        let mut tape = Tape::inference();
        let p = tape.constant(pred.clone());
        let l = edit_loss(&mut tape, p, scene, 1.0).unwrap();
        tape.value(l).item()
    };
    assert_eq!(loss(&s), 0.0);
    let op = EditOp::Add {
        agent: Agent::constant_velocity(0, Category::Car, [4.5, 1.9], [8.0, 0.0], 0.0, 0.0),
    };
    let added = apply_edit(&s, &op).unwrap();
    assert!(loss(&added) > 0.0);
    let removed = apply_edit(&added, &EditOp::Remove { agent: added.agents[0].clone() }).unwrap();
    assert_eq!(loss(&removed), 0.0);

    let mut clear = s.clone();
    clear.agents = vec![Agent::constant_velocity(0, Category::Car, [4.5, 1.9], [6.0, 9.0], 0.0, 0.0)];
    assert_eq!(loss(&clear), 0.0);
}
