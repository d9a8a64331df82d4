use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{dist, OrientedRect, Point};
use crate::language::{QaPair, QaSlots, TemplateSet};
use crate::numerics::{Tape, Var};
use crate::world::{ego_rects, Agent, Category, PolylineKind, Scene, HORIZON, MAX_AGENTS};
use crate::{Error, Result};

/// Added agents are placed at most this far from the ego, in meters.
pub const PLACEMENT_RADIUS: f64 = 12.0;
/// Inflation of the swept ego box that decides whether an edit matters.
pub const CORRIDOR_MARGIN: f64 = 0.5;

const CANDIDATE_SPACING: f64 = 1.0;
const MAX_SPEED: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditKind {
    Add,
    Remove,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EditOp {
    /// The agent's id is reassigned when applied.
    Add { agent: Agent },
    Remove { agent: Agent },
}

impl EditOp {
    pub fn kind(&self) -> EditKind {
        match self {
            EditOp::Add { .. } => EditKind::Add,
            EditOp::Remove { .. } => EditKind::Remove,
        }
    }

    pub fn agent(&self) -> &Agent {
        match self {
            EditOp::Add { agent } | EditOp::Remove { agent } => agent,
        }
    }
}

fn lane_candidates(scene: &Scene, extent: f64) -> Vec<(Point, f64)> {
    let mut out = Vec::new();
    for line in scene.map.iter().filter(|l| l.kind == PolylineKind::LaneCenter) {
        for w in line.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let len = dist(a, b);
            let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
            let steps = (len / CANDIDATE_SPACING).floor() as usize;
            for i in 0..=steps {
                let t = (i as f64 * CANDIDATE_SPACING / len).min(1.0);
                let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                if p[0].hypot(p[1]) <= PLACEMENT_RADIUS && p[0].abs() < extent && p[1].abs() < extent {
                    out.push((p, heading));
                }
            }
        }
    }
    out
}

/// Longest travel from `p` along `heading` that stays inside the extent.
fn travel_inside(p: Point, heading: f64, extent: f64) -> f64 {
    let d = [heading.cos(), heading.sin()];
    let mut t = f64::INFINITY;
    for axis in 0..2 {
        if d[axis] > 1e-12 {
            t = t.min((extent - p[axis]) / d[axis]);
        } else if d[axis] < -1e-12 {
            t = t.min((-extent - p[axis]) / d[axis]);
        }
    }
    t.max(0.0)
}

fn occupied(scene: &Scene) -> Vec<OrientedRect> {
    let mut boxes = scene.agent_rects_at(0);
    boxes.push(OrientedRect::new([0.0, 0.0], 0.0, scene.ego.size[0], scene.ego.size[1]));
    boxes
}

/// A car or truck on a lane center near the ego, clear of every box at
/// t = 0, no larger than twice the ego box, moving at constant velocity
/// with its whole footprint inside the map window.
pub fn propose_add<R: Rng>(scene: &Scene, extent: f64, rng: &mut R) -> Result<EditOp> {
    if scene.agents.len() >= MAX_AGENTS {
        return Err(Error::Infeasible(format!("scene already holds {MAX_AGENTS} agents")));
    }
    let mut candidates = lane_candidates(scene, extent);
    if candidates.is_empty() {
        return Err(Error::Infeasible("no lane positions within reach of the ego".into()));
    }
    candidates.shuffle(rng);
    let taken = occupied(scene);
    let limit = [2.0 * scene.ego.size[0], 2.0 * scene.ego.size[1]];
    for (p, heading) in candidates {
        let (category, size): (Category, [f64; 2]) = if rng.gen_bool(0.7) {
            (Category::Car, [rng.gen_range(4.0..4.8), rng.gen_range(1.7..2.0)])
        } else {
            (Category::Truck, [rng.gen_range(6.0..9.0), rng.gen_range(2.2..2.5)])
        };
        let size: [f64; 2] = [size[0].min(limit[0]), size[1].min(limit[1])];
        let rect = OrientedRect::new(p, heading, size[0], size[1]);
        let (lo, hi) = rect.bounds();
        if lo[0] < -extent || lo[1] < -extent || hi[0] > extent || hi[1] > extent {
            continue;
        }
        if taken.iter().any(|r| r.intersects(&rect)) {
            continue;
        }
        let travel = rect.corners().iter().map(|&c| travel_inside(c, heading, extent)).fold(f64::INFINITY, f64::min);
        let reach = travel / (HORIZON as f64 * crate::world::DT);
        let speed = rng.gen_range(0.0..MAX_SPEED).min(reach);
        let agent = Agent::constant_velocity(scene.next_agent_id(), category, size, p, heading, speed);
        return Ok(EditOp::Add { agent });
    }
    Err(Error::Infeasible("every lane position near the ego is occupied".into()))
}

pub fn propose_remove<R: Rng>(scene: &Scene, rng: &mut R) -> Result<EditOp> {
    scene
        .agents
        .choose(rng)
        .map(|a| EditOp::Remove { agent: a.clone() })
        .ok_or_else(|| Error::Infeasible("no agent to remove".into()))
}

/// Add or remove with equal odds; a failed add falls back to removal.
pub fn propose_edit(scene: &Scene, extent: f64, seed: u64) -> Result<EditOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if scene.agents.is_empty() || rng.gen_bool(0.5) {
        match propose_add(scene, extent, &mut rng) {
            Err(Error::Infeasible(_)) if !scene.agents.is_empty() => propose_remove(scene, &mut rng),
            other => other,
        }
    } else {
        propose_remove(scene, &mut rng)
    }
}

pub fn apply_edit(scene: &Scene, op: &EditOp) -> Result<Scene> {
    let mut out = scene.clone();
    match op {
        EditOp::Add { agent } => {
            let mut a = agent.clone();
            a.id = scene.next_agent_id();
            out.agents.push(a);
        }
        EditOp::Remove { agent } => {
            let before = out.agents.len();
            out.agents.retain(|a| a.id != agent.id);
            if out.agents.len() == before {
                return Err(Error::NotFound(format!("agent {} in scene {}", agent.id, scene.id)));
            }
        }
    }
    out.validate()?;
    Ok(out)
}

/// The ego box swept along the ground truth in steps of at most 0.5 m,
/// inflated by the corridor margin.
pub fn ego_corridor(scene: &Scene) -> Vec<OrientedRect> {
    let rects = ego_rects(&scene.ego.gt_traj, scene.ego.size);
    let mut out = vec![rects[0].inflated(CORRIDOR_MARGIN)];
    for w in rects.windows(2) {
        let (a, b) = (w[0], w[1]);
        let n = (dist(a.center, b.center) / 0.5).ceil().max(1.0) as usize;
        for i in 1..=n {
            let t = i as f64 / n as f64;
            let c = [
                a.center[0] + t * (b.center[0] - a.center[0]),
                a.center[1] + t * (b.center[1] - a.center[1]),
            ];
            out.push(OrientedRect::new(c, b.heading, b.length, b.width).inflated(CORRIDOR_MARGIN));
        }
    }
    out
}

/// Whether the agent's box touches the corridor at any step.
pub fn blocks_corridor(agent: &Agent, corridor: &[OrientedRect]) -> bool {
    (0..=HORIZON).any(|k| {
        let r = agent.rect_at(k);
        corridor.iter().any(|c| c.intersects(&r))
    })
}

/// Side of the ego the agent starts on.
pub fn relative_side(p: Point) -> &'static str {
    if p[0].abs() >= p[1].abs() {
        if p[0] >= 0.0 {
            "front"
        } else {
            "back"
        }
    } else if p[1] >= 0.0 {
        "left"
    } else {
        "right"
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// A question describing the edit, answered by the corridor test.
pub fn edit_qa(op: &EditOp, edited: &Scene) -> Result<QaPair> {
    let agent = op.agent();
    let affects = blocks_corridor(agent, &ego_corridor(edited));
    let mut slots = QaSlots::new();
    slots.insert("category", words(agent.category.name()));
    slots.insert("side", words(relative_side(agent.position_at(0))));
    let id = match op.kind() {
        EditKind::Add => {
            slots.insert("yes_no", words(if affects { "yes" } else { "no" }));
            slots.insert("effect", words(if affects { "affects" } else { "does not affect" }));
            "edit.add"
        }
        EditKind::Remove if affects => "edit.remove.blocking",
        EditKind::Remove => "edit.remove.clear",
    };
    TemplateSet::builtin().fill(id, &slots)
}

/// Clearance penalty of a predicted ego path against the edited agents.
pub fn edit_loss(tape: &mut Tape, pred: Var, edited: &Scene, margin: f64) -> Result<Var> {
    Ok(tape.clearance_penalty(pred, &edited.obstacles_per_step(), margin)?)
}
