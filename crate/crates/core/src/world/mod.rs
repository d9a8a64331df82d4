//! Synthetic driving world: scene types, procedural generation, BEV
//! rasterization, rule-based behavior labels, dataset files and splits.
//!
//! All coordinates are ego-centric at t = 0 with x forward and y left.
//! Timesteps are 0.5 s apart; index `k` in a trajectory is time `0.5 (k + 1)`.

mod behavior;
mod dataset;
mod generate;
mod mix;
mod raster;
mod split;

pub use behavior::{behavior_label, ego_behavior, BehaviorLabel, Motion, SpeedClass, BEHAVIOR_THRESHOLDS};
pub use dataset::{load_dataset, parse_dataset, save_dataset, write_dataset};
pub use generate::{generate_scene, GeneratorConfig};
pub use mix::{kind_counts, KindMix, SEED_STRIDE};
pub use raster::{rasterize_bev, GridSpec, OccupancyGrid, CHANNELS};
pub use split::{select_split, Split};

use serde::{Deserialize, Serialize};

use crate::geometry::{OrientedRect, Point};

pub const HORIZON: usize = 6;
pub const DT: f64 = 0.5;
pub const LANE_WIDTH: f64 = 3.5;
pub const EGO_SIZE: [f64; 2] = [4.5, 1.9];
/// Upper bound on agents per scene; matches the encoder's query bank.
pub const MAX_AGENTS: usize = 16;
pub const MAX_POLYLINES: usize = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorldError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("grid config error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Straight,
    TurnLeft,
    TurnRight,
    ThreePointTurn,
    ResumeFromStop,
    Overtake,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::Straight,
        ScenarioKind::TurnLeft,
        ScenarioKind::TurnRight,
        ScenarioKind::ThreePointTurn,
        ScenarioKind::ResumeFromStop,
        ScenarioKind::Overtake,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::TurnLeft => "turn-left",
            ScenarioKind::TurnRight => "turn-right",
            ScenarioKind::ThreePointTurn => "three-point-turn",
            ScenarioKind::ResumeFromStop => "resume-from-stop",
            ScenarioKind::Overtake => "overtake",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_long_tail(self) -> bool {
        matches!(
            self,
            ScenarioKind::ThreePointTurn | ScenarioKind::ResumeFromStop | ScenarioKind::Overtake
        )
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum PolylineKind {
    LaneCenter,
    Boundary,
    Crossing,
}

impl PolylineKind {
    pub fn index(self) -> usize {
        match self {
            PolylineKind::LaneCenter => 0,
            PolylineKind::Boundary => 1,
            PolylineKind::Crossing => 2,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Car,
    Truck,
    Pedestrian,
    Bicycle,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Car, Category::Truck, Category::Pedestrian, Category::Bicycle];

    pub fn index(self) -> usize {
        match self {
            Category::Car => 0,
            Category::Truck => 1,
            Category::Pedestrian => 2,
            Category::Bicycle => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Car => "car",
            Category::Truck => "truck",
            Category::Pedestrian => "pedestrian",
            Category::Bicycle => "bicycle",
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct MapPolyline {
    pub id: u32,
    pub kind: PolylineKind,
    #[serde(with = "nine::points")]
    pub points: Vec<Point>,
}

/// A road user moving at constant velocity along its heading.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Agent {
    pub id: u32,
    pub category: Category,
    /// length, width in meters
    #[serde(rename = "box", with = "nine::pair")]
    pub size: [f64; 2],
    #[serde(with = "nine::float")]
    pub heading: f64,
    #[serde(with = "nine::float")]
    pub speed: f64,
    /// Positions at t = 0.5, 1.0, ..., 3.0 s.
    #[serde(rename = "traj", with = "nine::points")]
    pub trajectory: Vec<Point>,
}

impl Agent {
    /// Center at step `k` (0 is t = 0; `k >= 1` indexes the trajectory).
    pub fn position_at(&self, k: usize) -> Point {
        if k == 0 {
            let (s, c) = self.heading.sin_cos();
            let p = self.trajectory[0];
            [p[0] - DT * self.speed * c, p[1] - DT * self.speed * s]
        } else {
            self.trajectory[k - 1]
        }
    }

    pub fn rect_at(&self, k: usize) -> OrientedRect {
        OrientedRect::new(self.position_at(k), self.heading, self.size[0], self.size[1])
    }

    /// Constant-velocity trajectory from a t = 0 pose.
    pub fn constant_velocity(
        id: u32,
        category: Category,
        size: [f64; 2],
        start: Point,
        heading: f64,
        speed: f64,
    ) -> Self {
        let (s, c) = heading.sin_cos();
        let trajectory = (1..=HORIZON)
            .map(|k| {
                let t = k as f64 * DT;
                [start[0] + speed * t * c, start[1] + speed * t * s]
            })
            .collect();
        Self {
            id,
            category,
            size,
            heading,
            speed,
            trajectory,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct EgoState {
    #[serde(rename = "box", with = "nine::pair")]
    pub size: [f64; 2],
    /// Observed speeds at t = -1.5, -1.0, -0.5, 0 s.
    #[serde(with = "nine::floats")]
    pub speeds: Vec<f64>,
    #[serde(with = "nine::points")]
    pub gt_traj: Vec<Point>,
}

impl EgoState {
    pub fn current_speed(&self) -> f64 {
        self.speeds.last().copied().unwrap_or(0.0)
    }

    /// Speeds implied by the ground-truth waypoints, one per step.
    pub fn future_speeds(&self) -> Vec<f64> {
        let mut prev = [0.0, 0.0];
        self.gt_traj
            .iter()
            .map(|&p| {
                let v = crate::geometry::dist(prev, p) / DT;
                prev = p;
                v
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub kind: ScenarioKind,
    pub map: Vec<MapPolyline>,
    pub agents: Vec<Agent>,
    pub ego: EgoState,
}

/// Ego footprints along a trajectory, heading from waypoint differences and
/// +x at t = 0. Index 0 is t = 0, index `k` is waypoint `k - 1`.
pub fn ego_rects(traj: &[Point], size: [f64; 2]) -> Vec<OrientedRect> {
    let mut out = vec![OrientedRect::new([0.0, 0.0], 0.0, size[0], size[1])];
    let mut prev = [0.0, 0.0];
    let mut heading = 0.0;
    for &p in traj {
        let d = [p[0] - prev[0], p[1] - prev[1]];
        if d[0].hypot(d[1]) > 1e-6 {
            heading = d[1].atan2(d[0]);
        }
        out.push(OrientedRect::new(p, heading, size[0], size[1]));
        prev = p;
    }
    out
}

impl Scene {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::InvalidScene(format!("scene {}: {m}", self.id)));
        if self.ego.gt_traj.len() != HORIZON {
            return bad(format!("ego has {} waypoints", self.ego.gt_traj.len()));
        }
        if self.ego.size.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return bad("ego box must be positive".into());
        }
        if self.agents.len() > MAX_AGENTS {
            return bad(format!("{} agents exceeds {MAX_AGENTS}", self.agents.len()));
        }
        if self.map.len() > MAX_POLYLINES {
            return bad(format!("{} polylines exceeds {MAX_POLYLINES}", self.map.len()));
        }
        let finite = |p: &Point| p[0].is_finite() && p[1].is_finite();
        if !self.ego.gt_traj.iter().all(finite) || !self.ego.speeds.iter().all(|v| v.is_finite()) {
            return bad("non-finite ego state".into());
        }
        let mut ids = std::collections::HashSet::new();
        for a in &self.agents {
            if !ids.insert(a.id) {
                return bad(format!("duplicate agent id {}", a.id));
            }
            if a.trajectory.len() != HORIZON {
                return bad(format!("agent {} has {} waypoints", a.id, a.trajectory.len()));
            }
            if a.size.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
                return bad(format!("agent {} box must be positive", a.id));
            }
            if !a.trajectory.iter().all(finite) || !a.heading.is_finite() || !a.speed.is_finite() {
                return bad(format!("agent {} non-finite", a.id));
            }
        }
        for l in &self.map {
            if l.points.len() < 2 {
                return bad(format!("polyline {} has fewer than 2 points", l.id));
            }
            if !l.points.iter().all(finite) {
                return bad(format!("polyline {} non-finite", l.id));
            }
            if l.points.windows(2).any(|w| w[0] == w[1]) {
                return bad(format!("polyline {} repeats a point", l.id));
            }
        }
        Ok(())
    }

    /// Agents ordered by id; the encoder binds query `i` to the `i`-th entry.
    pub fn agent_rank(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.agents.len()).collect();
        order.sort_by_key(|&i| self.agents[i].id);
        let mut rank = vec![0; self.agents.len()];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        rank
    }

    /// The world advanced `k` steps by its own dynamics, in the same frame.
    /// Agents keep constant velocity past the horizon.
    pub fn frame(&self, k: usize) -> Scene {
        let mut out = self.clone();
        if k == 0 {
            return out;
        }
        for a in &mut out.agents {
            let (s, c) = a.heading.sin_cos();
            let start = a.position_at(k);
            a.trajectory = (1..=HORIZON)
                .map(|j| {
                    let t = j as f64 * DT;
                    [start[0] + a.speed * t * c, start[1] + a.speed * t * s]
                })
                .collect();
            let src = self.agents.iter().find(|x| x.id == a.id).expect("same agent");
            for (j, p) in a.trajectory.iter_mut().enumerate() {
                if k + j < HORIZON {
                    *p = src.trajectory[k + j];
                }
            }
        }
        out
    }

    /// Agent footprints at step `k` (0 = t0).
    pub fn agent_rects_at(&self, k: usize) -> Vec<OrientedRect> {
        self.agents.iter().map(|a| a.rect_at(k)).collect()
    }

    /// Per-waypoint obstacle lists for the clearance penalty.
    pub fn obstacles_per_step(&self) -> Vec<Vec<OrientedRect>> {
        (1..=HORIZON).map(|k| self.agent_rects_at(k)).collect()
    }

    pub fn next_agent_id(&self) -> u32 {
        self.agents.iter().map(|a| a.id + 1).max().unwrap_or(0)
    }
}

/// Rounds to 9 significant digits, the precision of the dataset format.
pub fn quantize(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

pub(crate) mod nine {
    //! Serde adapters writing floats at 9 significant digits.
    use super::quantize;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub mod float {
        use super::*;
        pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
            quantize(*v).serialize(s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
            f64::deserialize(d)
        }
    }

    pub mod floats {
        use super::*;
        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            v.iter().map(|x| quantize(*x)).collect::<Vec<_>>().serialize(s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<f64>::deserialize(d)
        }
    }

    pub mod pair {
        use super::*;
        pub fn serialize<S: Serializer>(v: &[f64; 2], s: S) -> Result<S::Ok, S::Error> {
            [quantize(v[0]), quantize(v[1])].serialize(s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 2], D::Error> {
            <[f64; 2]>::deserialize(d)
        }
    }

    pub mod points {
        use super::*;
        pub fn serialize<S: Serializer>(v: &[[f64; 2]], s: S) -> Result<S::Ok, S::Error> {
            v.iter()
                .map(|p| [quantize(p[0]), quantize(p[1])])
                .collect::<Vec<_>>()
                .serialize(s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<[f64; 2]>, D::Error> {
            Vec::<[f64; 2]>::deserialize(d)
        }
    }
}
