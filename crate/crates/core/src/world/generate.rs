use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    ego_rects, quantize, Agent, Category, EgoState, MapPolyline, PolylineKind, ScenarioKind, Scene,
    WorldError, DT, EGO_SIZE, HORIZON, LANE_WIDTH, MAX_AGENTS,
};
use crate::geometry::{OrientedRect, Point};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    /// Background agents sampled per scene, uniformly in `0..=max_agents`.
    pub max_agents: usize,
    /// Share of straight scenes where the ego waits behind a stopped car.
    pub stopped_fraction: f64,
    pub crossing_probability: f64,
    /// Agents must stay inside this half-width at t = 0.
    pub extent: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            max_agents: 6,
            stopped_fraction: 0.5,
            crossing_probability: 0.3,
            extent: 16.0,
        }
    }
}

const ATTEMPTS_PER_AGENT: usize = 40;

/// Deterministic scene for `(seed, kind)`.
pub fn generate_scene(seed: u64, kind: ScenarioKind, cfg: &GeneratorConfig) -> Result<Scene, WorldError> {
    if cfg.max_agents + 1 > MAX_AGENTS {
        return Err(WorldError::Config(format!(
            "max_agents {} leaves no room for scripted agents (limit {MAX_AGENTS})",
            cfg.max_agents
        )));
    }
    let stream = ScenarioKind::ALL.iter().position(|k| *k == kind).unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream + 1);

    let mut b = Builder::default();
    match kind {
        ScenarioKind::Straight => straight(&mut rng, cfg, &mut b),
        ScenarioKind::TurnLeft => turn(&mut rng, 1.0, &mut b),
        ScenarioKind::TurnRight => turn(&mut rng, -1.0, &mut b),
        ScenarioKind::ThreePointTurn => three_point_turn(&mut rng, &mut b),
        ScenarioKind::ResumeFromStop => resume(&mut rng, &mut b),
        ScenarioKind::Overtake => overtake(&mut rng, &mut b),
    }
    if !matches!(kind, ScenarioKind::ThreePointTurn) && rng.gen::<f64>() < cfg.crossing_probability {
        let x = rng.gen_range(10.0..22.0);
        b.polyline(PolylineKind::Crossing, vec![[x, -7.0], [x, 7.0]]);
    }

    let n_background = rng.gen_range(0..=cfg.max_agents);
    let ego_path = ego_rects(&b.gt, EGO_SIZE);
    for _ in 0..n_background {
        for _ in 0..ATTEMPTS_PER_AGENT {
            let cand = sample_agent(&mut rng, b.agents.len() as u32);
            if b.accepts(&cand, &ego_path, cfg.extent) {
                b.agents.push(cand);
                break;
            }
        }
    }

    let scene = b.finish(seed, kind);
    scene.validate()?;
    Ok(scene)
}

#[derive(Default)]
struct Builder {
    map: Vec<MapPolyline>,
    agents: Vec<Agent>,
    gt: Vec<Point>,
    speeds: Vec<f64>,
}

impl Builder {
    fn polyline(&mut self, kind: PolylineKind, points: Vec<Point>) {
        let id = self.map.len() as u32;
        self.map.push(MapPolyline { id, kind, points });
    }

    fn accepts(&self, cand: &Agent, ego_path: &[OrientedRect], extent: f64) -> bool {
        let p0 = cand.position_at(0);
        if p0[0].abs() > extent - 1.0 || p0[1].abs() > extent - 1.0 {
            return false;
        }
        for (k, ego) in ego_path.iter().enumerate().take(HORIZON + 1) {
            let r = cand.rect_at(k).inflated(0.3);
            if r.intersects(&ego.inflated(0.5)) {
                return false;
            }
            if self.agents.iter().any(|a| a.rect_at(k).intersects(&r)) {
                return false;
            }
        }
        true
    }

    fn finish(self, seed: u64, kind: ScenarioKind) -> Scene {
        let qp = |p: &Point| [quantize(p[0]), quantize(p[1])];
        let map = self
            .map
            .into_iter()
            .map(|mut l| {
                l.points = l.points.iter().map(qp).collect();
                l.points.dedup();
                l
            })
            .collect();
        let agents = self
            .agents
            .into_iter()
            .map(|mut a| {
                a.size = qp(&a.size);
                a.heading = quantize(a.heading);
                a.speed = quantize(a.speed);
                a.trajectory = a.trajectory.iter().map(qp).collect();
                a
            })
            .collect();
        Scene {
            id: seed,
            kind,
            map,
            agents,
            ego: EgoState {
                size: EGO_SIZE,
                speeds: self.speeds.iter().map(|&v| quantize(v)).collect(),
                gt_traj: self.gt.iter().map(qp).collect(),
            },
        }
    }
}

fn times() -> impl Iterator<Item = f64> {
    (1..=HORIZON).map(|k| k as f64 * DT)
}

fn history(f: impl Fn(f64) -> f64) -> Vec<f64> {
    [-1.5, -1.0, -0.5, 0.0].iter().map(|&t| f(t).max(0.0)).collect()
}

fn line(y: f64, x0: f64, x1: f64) -> Vec<Point> {
    let n = ((x1 - x0) / 4.0).ceil().max(1.0) as usize;
    (0..=n).map(|i| [x0 + (x1 - x0) * i as f64 / n as f64, y]).collect()
}

/// Ego lane at y = 0, same-direction lane on the left, opposing lane right.
fn straight_road(b: &mut Builder) {
    b.polyline(PolylineKind::LaneCenter, line(0.0, -16.0, 40.0));
    b.polyline(PolylineKind::LaneCenter, line(LANE_WIDTH, -16.0, 40.0));
    b.polyline(PolylineKind::LaneCenter, line(-LANE_WIDTH, 40.0, -16.0));
    b.polyline(PolylineKind::Boundary, line(1.5 * LANE_WIDTH, -16.0, 40.0));
    b.polyline(PolylineKind::Boundary, line(-1.5 * LANE_WIDTH, -16.0, 40.0));
}

fn straight(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, b: &mut Builder) {
    straight_road(b);
    if rng.gen::<f64>() < cfg.stopped_fraction {
        b.gt = vec![[0.0, 0.0]; HORIZON];
        b.speeds = vec![0.0; 4];
        let x = rng.gen_range(6.0..8.0);
        let size = [rng.gen_range(4.0..5.0), rng.gen_range(1.7..2.0)];
        b.agents.push(Agent::constant_velocity(0, Category::Car, size, [x, 0.0], 0.0, 0.0));
        return;
    }
    let v0 = rng.gen_range(3.0..10.0);
    let a = rng.gen_range(-1.0..1.0);
    b.gt = times().map(|t| [v0 * t + 0.5 * a * t * t, 0.0]).collect();
    b.speeds = history(|t| v0 + a * t);
}

/// Position after travelling `s` meters: straight for `s0`, then a quarter
/// arc of radius `r` toward `side` (+1 left), then straight again.
fn turn_path(s: f64, s0: f64, r: f64, side: f64) -> Point {
    if s <= s0 {
        return [s, 0.0];
    }
    let arc = 0.5 * PI * r;
    let u = (s - s0).min(arc);
    let phi = u / r;
    let mut p = [s0 + r * phi.sin(), side * r * (1.0 - phi.cos())];
    if s - s0 > arc {
        p[1] += side * (s - s0 - arc);
    }
    p
}

fn turn(rng: &mut ChaCha8Rng, side: f64, b: &mut Builder) {
    let v = rng.gen_range(3.0..7.0);
    let s0 = rng.gen_range(0.0..6.0);
    let r = rng.gen_range(8.0..14.0);
    let samples: Vec<Point> = (0..=16).map(|i| turn_path(-12.0 + i as f64 * 3.0, s0, r, side)).collect();
    let offset = |d: f64| -> Vec<Point> {
        let mut out = Vec::with_capacity(samples.len());
        for i in 0..samples.len() {
            let (p, q) = if i + 1 < samples.len() { (samples[i], samples[i + 1]) } else { (samples[i - 1], samples[i]) };
            let h = (q[1] - p[1]).atan2(q[0] - p[0]);
            out.push([samples[i][0] - d * h.sin(), samples[i][1] + d * h.cos()]);
        }
        out
    };
    b.polyline(PolylineKind::LaneCenter, samples.clone());
    b.polyline(PolylineKind::Boundary, offset(0.5 * LANE_WIDTH));
    b.polyline(PolylineKind::Boundary, offset(-0.5 * LANE_WIDTH));
    let cross_x = s0 + r;
    b.polyline(PolylineKind::LaneCenter, vec![[cross_x - 1.75, -16.0], [cross_x - 1.75, 16.0]]);
    b.polyline(PolylineKind::LaneCenter, vec![[cross_x + 1.75, 16.0], [cross_x + 1.75, -16.0]]);
    b.gt = times().map(|t| turn_path(v * t, s0, r, side)).collect();
    b.speeds = history(|_| v);
}

/// Forward-left arc, reverse arc, forward again: the ego ends up facing -x
/// in the opposing lane.
fn three_point_turn(rng: &mut ChaCha8Rng, b: &mut Builder) {
    b.polyline(PolylineKind::LaneCenter, line(0.0, -16.0, 30.0));
    b.polyline(PolylineKind::LaneCenter, line(LANE_WIDTH, 30.0, -16.0));
    b.polyline(PolylineKind::Boundary, line(-0.5 * LANE_WIDTH, -16.0, 30.0));
    b.polyline(PolylineKind::Boundary, line(1.5 * LANE_WIDTH, -16.0, 30.0));

    let v1 = rng.gen_range(1.5..2.5);
    let v2 = rng.gen_range(1.0..2.0);
    let t1 = 1.25;
    let t2 = 2.0;
    let w1 = 1.2;
    let w2 = 1.0;
    let w3 = (PI - w1 * t1 - w2 * (t2 - t1)) / (3.0 - t2);
    // (speed, yaw rate) piecewise in time; reversing turns the nose further left.
    let control = |t: f64| -> (f64, f64) {
        if t < t1 {
            (v1, w1)
        } else if t < t2 {
            (-v2, w2)
        } else {
            (v1, w3)
        }
    };
    let mut gt = Vec::with_capacity(HORIZON);
    let (mut x, mut y, mut th) = (0.0f64, 0.0f64, 0.0f64);
    let sub = 50;
    let h = DT / sub as f64;
    for k in 0..HORIZON {
        for j in 0..sub {
            let t = k as f64 * DT + (j as f64 + 0.5) * h;
            let (v, w) = control(t);
            let mid = th + 0.5 * w * h;
            x += v * mid.cos() * h;
            y += v * mid.sin() * h;
            th += w * h;
        }
        gt.push([x, y]);
    }
    b.gt = gt;
    b.speeds = history(|_| v1);
}

fn resume(rng: &mut ChaCha8Rng, b: &mut Builder) {
    straight_road(b);
    let t0 = rng.gen_range(0.0..1.0);
    let a = rng.gen_range(1.5..3.0);
    b.gt = times()
        .map(|t| {
            let dt = (t - t0).max(0.0);
            [0.5 * a * dt * dt, 0.0]
        })
        .collect();
    b.speeds = vec![0.0; 4];
}

fn overtake(rng: &mut ChaCha8Rng, b: &mut Builder) {
    straight_road(b);
    let v = rng.gen_range(7.0..10.0);
    let lead_x = rng.gen_range(7.0..9.0);
    let lead_v = rng.gen_range(1.0..2.0);
    let size = [rng.gen_range(4.0..5.0), rng.gen_range(1.7..2.0)];
    b.agents.push(Agent::constant_velocity(0, Category::Car, size, [lead_x, 0.0], 0.0, lead_v));
    b.gt = times()
        .map(|t| {
            let s = (PI * t / 3.0).sin().max(0.0);
            [v * t, LANE_WIDTH * s.sqrt()]
        })
        .collect();
    b.speeds = history(|_| v);
}

fn sample_agent(rng: &mut ChaCha8Rng, id: u32) -> Agent {
    let roll: f64 = rng.gen();
    let category = match roll {
        r if r < 0.55 => Category::Car,
        r if r < 0.7 => Category::Truck,
        r if r < 0.85 => Category::Pedestrian,
        _ => Category::Bicycle,
    };
    let forward = rng.gen_bool(0.5);
    let heading = if forward { 0.0 } else { PI };
    let (size, start, speed) = match category {
        Category::Car | Category::Truck => {
            let size = if category == Category::Car {
                [rng.gen_range(4.0..5.0), rng.gen_range(1.7..2.0)]
            } else {
                [rng.gen_range(6.0..8.5), rng.gen_range(2.3..2.6)]
            };
            let lane = if forward {
                if rng.gen_bool(0.5) {
                    0.0
                } else {
                    LANE_WIDTH
                }
            } else {
                -LANE_WIDTH
            };
            let y = lane + rng.gen_range(-0.3..0.3);
            let x = rng.gen_range(-14.0..14.0);
            let stopped = rng.gen_bool(0.2);
            let speed = if stopped { 0.0 } else { rng.gen_range(2.0..10.0) };
            (size, [x, y], speed)
        }
        Category::Pedestrian => {
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let y = side * rng.gen_range(6.5..9.0);
            ([0.6, 0.6], [rng.gen_range(-14.0..14.0), y], rng.gen_range(0.0..1.6))
        }
        Category::Bicycle => {
            let side = if forward { -1.0 } else { 1.0 };
            let y = side * rng.gen_range(5.5..6.5);
            ([1.8, 0.6], [rng.gen_range(-14.0..14.0), y], rng.gen_range(1.0..5.0))
        }
    };
    Agent::constant_velocity(id, category, size, start, heading, speed)
}
