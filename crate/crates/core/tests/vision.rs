use dima::encoder::{Encoder, AGENT_OUTPUTS};
use dima::geometry::OrientedRect;
use dima::model::ModelConfig;
use dima::numerics::{param_grad_check, Array, ParamStore, Tape};
use dima::planner::{planning_loss, planning_loss_value, Planner, PlanningLossConfig, Trajectory};
use dima::world::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        grid: GridSpec {
            resolution: 1.0,
            extent: 4.0,
        },
        patch: 2,
        ..ModelConfig::default()
    }
}

fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore, Encoder, Planner) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, cfg, &mut rng).unwrap();
    let plan = Planner::new(&mut store, cfg, &mut rng).unwrap();
    (store, enc, plan)
}

fn scene(seed: u64, kind: ScenarioKind) -> Scene {
    generate_scene(seed, kind, &GeneratorConfig::default()).unwrap()
}

fn zero_param(store: &mut ParamStore, name: &str) {
    let id = store.id(name).unwrap();
    let shape = store.get(id).shape().to_vec();
    store.set(id, Array::zeros(&shape)).unwrap();
}

#[test]
fn empty_scene_still_yields_an_ego_token() {
    let cfg = ModelConfig::default();
    let (store, enc, _) = build(&cfg, 0);
    let mut s = scene(3, ScenarioKind::Straight);
    s.agents.clear();
    s.map.clear();
    let t = enc.encode(&store, &s, &cfg.grid).unwrap();
    assert_eq!(t.a.shape(), &[0, 32]);
    assert_eq!(t.m.shape(), &[0, 32]);
    assert_eq!(t.e.shape(), &[1, 32]);
    assert_eq!(t.b.shape(), &[64, 32]);
    assert!(t.e.data().iter().all(|v| v.is_finite()));
}

#[test]
fn token_shapes_follow_the_scene_and_repeat_exactly() {
    let cfg = ModelConfig::default();
    let (store, enc, _) = build(&cfg, 1);
    for seed in 0..12 {
        let s = scene(seed, ScenarioKind::ALL[seed as usize % 6]);
        let t1 = enc.encode(&store, &s, &cfg.grid).unwrap();
        let t2 = enc.encode(&store, &s, &cfg.grid).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.a.rows(), s.agents.len());
        assert_eq!(t1.m.rows(), s.map.len());
    }
}

#[test]
fn permuting_agents_permutes_agent_tokens() {
    let cfg = ModelConfig::default();
    let (store, enc, _) = build(&cfg, 2);
    let s = (0..50)
        .map(|seed| scene(seed, ScenarioKind::Straight))
        .find(|s| s.agents.len() >= 3)
        .expect("a scene with several agents");
    let mut shuffled = s.clone();
    shuffled.agents.reverse();
    let a = enc.encode(&store, &s, &cfg.grid).unwrap().a;
    let b = enc.encode(&store, &shuffled, &cfg.grid).unwrap().a;
    let n = s.agents.len();
    for i in 0..n {
        assert_eq!(a.row(i), b.row(n - 1 - i));
    }
}

#[test]
fn too_many_agents_is_a_capacity_error() {
    let cfg = ModelConfig::default();
    let (store, enc, _) = build(&cfg, 3);
    let mut s = scene(0, ScenarioKind::Straight);
    s.agents = (0..17)
        .map(|i| Agent::constant_velocity(i, Category::Pedestrian, [0.5, 0.5], [-10.0 + i as f64, 10.0], 0.0, 0.0))
        .collect();
    assert!(matches!(enc.encode(&store, &s, &cfg.grid), Err(dima::Error::Capacity(_))));
}

#[test]
fn decoder_heads_have_contract_shapes() {
    let cfg = ModelConfig::default();
    let (mut store, enc, _) = build(&cfg, 4);
    let s = (0..50).map(|k| scene(k, ScenarioKind::Overtake)).find(|s| s.agents.len() >= 2).unwrap();
    let grid = rasterize_bev(&s, &cfg.grid).unwrap();

    let mut tape = Tape::inference();
    let t = enc.forward(&mut tape, &store, &s, &grid).unwrap();
    let agents = enc.decode_agents(&mut tape, &store, t.a).unwrap();
    assert_eq!(tape.value(agents).shape(), &[s.agents.len(), AGENT_OUTPUTS]);
    let (logits, ends) = enc.decode_map(&mut tape, &store, t.m).unwrap();
    assert_eq!(tape.value(logits).shape(), &[s.map.len(), 3]);
    assert_eq!(tape.value(ends).shape(), &[s.map.len(), 4]);

    for name in ["enc.agent_head.w", "enc.agent_head.b", "enc.map_class.w", "enc.map_class.b", "enc.map_endpoint.w", "enc.map_endpoint.b"] {
        zero_param(&mut store, name);
    }
    let mut tape = Tape::inference();
    let t = enc.forward(&mut tape, &store, &s, &grid).unwrap();
    let agents = enc.decode_agents(&mut tape, &store, t.a).unwrap();
    assert!(tape.value(agents).data().iter().all(|&v| v == 0.0));
    let (logits, ends) = enc.decode_map(&mut tape, &store, t.m).unwrap();
    let probs = tape.softmax(logits).unwrap();
    assert!(tape.value(probs).data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    assert!(tape.value(ends).data().iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = small_config();
    let (store, enc, _) = build(&cfg, 5);
    let s = (0..50).map(|k| scene(k, ScenarioKind::Straight)).find(|s| !s.agents.is_empty()).unwrap();
    let grid = rasterize_bev(&s, &cfg.grid).unwrap();
    let ids = store.ids_with_prefix(&["enc."]);
    let report = param_grad_check(&store, &ids, 3, 1e-5, |tape, st| {
        let t = enc.forward(tape, st, &s, &grid).map_err(num)?;
        let parts = [t.b, t.e, t.a, t.m];
        let mut total = tape.sum(parts[0])?;
        for &p in &parts[1..] {
            let s = tape.sum(p)?;
            total = tape.add(total, s)?;
        }
        let aux = enc.auxiliary_loss(tape, st, &s, &t).map_err(num)?;
        tape.add(total, aux)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

fn num(e: dima::Error) -> dima::numerics::NumericsError {
    match e {
        dima::Error::Numerics(n) => n,
        other => dima::numerics::NumericsError::Contract(other.to_string()),
    }
}

#[test]
fn planner_output_contract() {
    let cfg = ModelConfig::default();
    let (mut store, enc, plan) = build(&cfg, 6);
    let s = scene(9, ScenarioKind::TurnLeft);
    let tokens = enc.encode(&store, &s, &cfg.grid).unwrap();
    let (traj, feats) = plan.plan(&store, &tokens).unwrap();
    assert_eq!(traj.waypoints().len(), 6);
    assert_eq!(feats.penultimate.shape(), &[1, 32]);
    assert_eq!(plan.plan(&store, &tokens).unwrap().0, traj);

    // a 1e-2 nudge to any token set moves the penultimate features
    for which in 0..4 {
        let mut t2 = tokens.clone();
        let target = match which {
            0 => &mut t2.b,
            1 => &mut t2.e,
            2 => &mut t2.a,
            _ => &mut t2.m,
        };
        if target.is_empty() {
            continue;
        }
        let mut data = target.data().to_vec();
        data[0] += 1e-2;
        *target = Array::new(target.shape().to_vec(), data).unwrap();
        let (_, f2) = plan.plan(&store, &t2).unwrap();
        assert!(f2.penultimate.max_abs_diff(&feats.penultimate) > 0.0, "token set {which}");
    }

    zero_param(&mut store, "plan.out.w");
    zero_param(&mut store, "plan.out.b");
    let (traj, _) = plan.plan(&store, &tokens).unwrap();
    assert!(traj.waypoints().iter().all(|p| p == &[0.0, 0.0]));
}

#[test]
fn planner_waypoint_loss_gradients_match_finite_differences() {
    let cfg = small_config();
    let (store, enc, plan) = build(&cfg, 7);
    let s = scene(4, ScenarioKind::TurnRight);
    let grid = rasterize_bev(&s, &cfg.grid).unwrap();
    let ids = store.ids_with_prefix(&["plan.", "enc.ego"]);
    let obstacles = vec![vec![]; 6];
    let report = param_grad_check(&store, &ids, 4, 1e-5, |tape, st| {
        let t = enc.forward(tape, st, &s, &grid).map_err(num)?;
        let (wp, _) = plan.forward(tape, st, &t).map_err(num)?;
        planning_loss(tape, wp, &s.ego.gt_traj, &obstacles, &PlanningLossConfig::default()).map_err(num)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

fn stationary_scene(box_center: [f64; 2]) -> Scene {
    let mut s = scene(0, ScenarioKind::Straight);
    s.agents = vec![Agent::constant_velocity(0, Category::Car, [4.0, 2.0], box_center, 0.0, 0.0)];
    s
}

#[test]
fn planning_loss_examples() {
    let cfg = PlanningLossConfig::default();
    // ground truth far from the only agent: loss vanishes on an exact match
    let s = stationary_scene([0.0, 12.0]);
    let gt = Trajectory::new(s.ego.gt_traj.clone()).unwrap();
    assert_eq!(planning_loss_value(&gt, &s, &cfg).unwrap(), 0.0);

    // a prediction that drives through a parked car
    let s = stationary_scene([6.0, 0.0]);
    let through = Trajectory::new((1..=6).map(|k| [2.0 * k as f64, 0.0]).collect()).unwrap();
    let gt_only = {
        let mut tape = Tape::inference();
        let p = tape.constant(through.to_array());
        let g = tape.constant(Trajectory::new(s.ego.gt_traj.clone()).unwrap().to_array());
        let l = tape.l2_loss(p, g).unwrap();
        tape.value(l).item()
    };
    // oracle: distance from each waypoint to the 4x2 box centered at (6, 0)
    let oracle_pen: f64 = through
        .waypoints()
        .iter()
        .map(|p| {
            let dx = (p[0] - 6.0).abs() - 2.0;
            let dy = p[1].abs() - 1.0;
            let outside = dx.max(0.0).hypot(dy.max(0.0));
            let sd = outside + dx.max(dy).min(0.0);
            (1.0 - sd).max(0.0)
        })
        .sum();
    assert!(oracle_pen > 0.0);
    let l1 = planning_loss_value(&through, &s, &cfg).unwrap();
    assert!((l1 - gt_only - oracle_pen).abs() < 1e-12, "{l1} vs {}", gt_only + oracle_pen);

    let doubled = PlanningLossConfig {
        lambda_col: 2.0,
        ..cfg
    };
    let l2 = planning_loss_value(&through, &s, &doubled).unwrap();
    assert!((l2 - gt_only - 2.0 * oracle_pen).abs() < 1e-12);
}

#[test]
fn clearance_penalty_is_zero_exactly_when_clear() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    use rand::Rng;
    for _ in 0..300 {
        let rect = OrientedRect::new(
            [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)],
            rng.gen_range(-3.0..3.0),
            rng.gen_range(1.0..6.0),
            rng.gen_range(0.5..3.0),
        );
        let pts: Vec<[f64; 2]> = (0..6).map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)]).collect();
        let mut tape = Tape::inference();
        let p = tape.constant(Array::from_rows(&pts.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap());
        let pen = tape.clearance_penalty(p, &vec![vec![rect]; 6], 1.0).unwrap();
        // brute force: sample the rectangle densely and take the nearest sample
        let clear = pts.iter().all(|q| {
            let inside = rect.contains(*q);
            let mut best = f64::INFINITY;
            for i in 0..=200 {
                for j in 0..=1 {
                    for (u, v) in [(i as f64 / 200.0, j as f64), (j as f64, i as f64 / 200.0)] {
                        let local = [(u - 0.5) * rect.length, (v - 0.5) * rect.width];
                        let (s, c) = rect.heading.sin_cos();
                        let w = [rect.center[0] + c * local[0] - s * local[1], rect.center[1] + s * local[0] + c * local[1]];
                        best = best.min((w[0] - q[0]).hypot(w[1] - q[1]));
                    }
                }
            }
            !inside && best >= 1.0 + 1e-3
        });
        let near_edge = pts.iter().any(|q| {
            let sd = rect.signed_distance(*q).0;
            (sd - 1.0).abs() < 2e-3
        });
        if !near_edge {
            assert_eq!(tape.value(pen).item() == 0.0, clear);
        }
    }
}
