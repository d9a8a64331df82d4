//! Open-loop planning metrics: waypoint L2 under two averaging protocols,
//! grid-discretized collision checks, split reports and fused inference.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::geometry::{OrientedRect, Point};
use crate::planner::Trajectory;
use crate::world::{ego_rects, Scene, HORIZON};
use crate::{Error, Result};

/// Named protocol presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolKind {
    /// Cumulative averaging, headline = mean of the 1/2/3 s values.
    Vad,
    /// Per-timestep errors, fine collision grid.
    Standardized,
}

impl FromStr for ProtocolKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vad" => Ok(ProtocolKind::Vad),
            "standardized" => Ok(ProtocolKind::Standardized),
            _ => Err(format!("unknown protocol `{s}` (expected vad or standardized)")),
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolKind::Vad => "vad",
            ProtocolKind::Standardized => "standardized",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimestepMode {
    AtTimestep,
    CumulativeAverage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregate {
    MeanOneTwoThree,
    MeanAll,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalProtocol {
    pub timestep_mode: TimestepMode,
    pub aggregate: Aggregate,
    /// Collision grid cell size in meters.
    pub collision_resolution: f64,
}

impl EvalProtocol {
    pub fn new(timestep_mode: TimestepMode, aggregate: Aggregate, collision_resolution: f64) -> Result<Self> {
        if !(collision_resolution > 0.0 && collision_resolution.is_finite()) {
            return Err(Error::Config(format!("collision resolution {collision_resolution} must be positive")));
        }
        Ok(Self {
            timestep_mode,
            aggregate,
            collision_resolution,
        })
    }

    pub fn preset(kind: ProtocolKind) -> Self {
        match kind {
            ProtocolKind::Vad => Self {
                timestep_mode: TimestepMode::CumulativeAverage,
                aggregate: Aggregate::MeanOneTwoThree,
                collision_resolution: 0.5,
            },
            ProtocolKind::Standardized => Self {
                timestep_mode: TimestepMode::AtTimestep,
                aggregate: Aggregate::MeanAll,
                collision_resolution: 0.1,
            },
        }
    }
}

/// Per-waypoint errors of one prediction and the values derived from them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct L2Profile {
    pub errors: [f64; HORIZON],
    /// Reported values at 1 s, 2 s, 3 s.
    pub horizons: [f64; 3],
    pub ave_123: f64,
    pub ave_all: f64,
}

impl L2Profile {
    pub fn headline(&self, aggregate: Aggregate) -> f64 {
        match aggregate {
            Aggregate::MeanOneTwoThree => self.ave_123,
            Aggregate::MeanAll => self.ave_all,
        }
    }
}

/// The 1/2/3 s values of a per-waypoint error sequence.
pub fn horizon_values(errors: &[f64; HORIZON], mode: TimestepMode) -> [f64; 3] {
    [2, 4, 6].map(|n| match mode {
        TimestepMode::AtTimestep => errors[n - 1],
        TimestepMode::CumulativeAverage => errors[..n].iter().sum::<f64>() / n as f64,
    })
}

pub fn mean3(v: [f64; 3]) -> f64 {
    (v[0] + v[1] + v[2]) / 3.0
}

/// Two-decimal rounding as printed in result tables.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

pub fn l2_profile(pred: &[Point], gt: &[Point], mode: TimestepMode) -> Result<L2Profile> {
    if pred.len() != HORIZON || gt.len() != HORIZON {
        return Err(Error::Contract(format!(
            "L2 needs {HORIZON} waypoints on both sides, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut errors = [0.0; HORIZON];
    for (e, (p, g)) in errors.iter_mut().zip(pred.iter().zip(gt)) {
        *e = (p[0] - g[0]).hypot(p[1] - g[1]);
    }
    let horizons = horizon_values(&errors, mode);
    Ok(L2Profile {
        errors,
        horizons,
        ave_123: mean3(horizons),
        ave_all: errors.iter().sum::<f64>() / HORIZON as f64,
    })
}

/// Cells (as integer lattice coordinates) whose centers lie in `r`.
fn claimed(r: &OrientedRect, res: f64) -> HashSet<(i64, i64)> {
    let (lo, hi) = r.bounds();
    let first = |v: f64| (v / res - 0.5).ceil() as i64;
    let last = |v: f64| (v / res - 0.5).floor() as i64;
    let mut out = HashSet::new();
    for i in first(lo[0])..=last(hi[0]) {
        for j in first(lo[1])..=last(hi[1]) {
            let c = [(i as f64 + 0.5) * res, (j as f64 + 0.5) * res];
            if r.contains(c) {
                out.insert((i, j));
            }
        }
    }
    out
}

/// Whether the ego footprint along `pred` and any agent claim a common
/// grid cell at the same step.
pub fn collides_on_grid(pred: &Trajectory, scene: &Scene, resolution: f64) -> bool {
    let ego = ego_rects(pred.waypoints(), scene.ego.size);
    (1..=HORIZON).any(|k| {
        let agents: Vec<OrientedRect> = scene.agent_rects_at(k);
        let near: Vec<&OrientedRect> = agents.iter().filter(|a| boxes_near(a, &ego[k])).collect();
        if near.is_empty() {
            return false;
        }
        let cells = claimed(&ego[k], resolution);
        near.iter().any(|a| claimed(a, resolution).iter().any(|c| cells.contains(c)))
    })
}

fn boxes_near(a: &OrientedRect, b: &OrientedRect) -> bool {
    let (alo, ahi) = a.bounds();
    let (blo, bhi) = b.bounds();
    alo[0] <= bhi[0] && blo[0] <= ahi[0] && alo[1] <= bhi[1] && blo[1] <= ahi[1]
}

/// Exact rectangle-overlap version of `collides_on_grid`.
pub fn collides_exact(pred: &Trajectory, scene: &Scene) -> bool {
    let ego = ego_rects(pred.waypoints(), scene.ego.size);
    (1..=HORIZON).any(|k| scene.agent_rects_at(k).iter().any(|a| a.intersects(&ego[k])))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub scene_id: u64,
    pub profile: L2Profile,
    pub collided: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub split: String,
    pub protocol: EvalProtocol,
    pub protocol_name: String,
    pub count: usize,
    /// Mean reported values at 1/2/3 s; NaN when the split is empty.
    pub l2: [f64; 3],
    pub ave_123: f64,
    pub ave_all: f64,
    /// Percent of samples with a collision.
    pub collision_rate: f64,
    pub samples: Vec<SampleResult>,
}

pub const METRICS_HEADER: &str = "split,protocol,count,l2_1s,l2_2s,l2_3s,ave_123,ave_all,collision";

fn cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NA".into()
    }
}

impl MetricsReport {
    pub fn from_samples(split: &str, protocol_name: &str, protocol: EvalProtocol, samples: Vec<SampleResult>) -> Self {
        let n = samples.len();
        let mean = |f: &dyn Fn(&SampleResult) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                samples.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let l2 = [0, 1, 2].map(|i| mean(&|s| s.profile.horizons[i]));
        Self {
            split: split.to_string(),
            protocol,
            protocol_name: protocol_name.to_string(),
            count: n,
            l2,
            ave_123: mean3(l2),
            ave_all: mean(&|s| s.profile.ave_all),
            collision_rate: mean(&|s| if s.collided { 100.0 } else { 0.0 }),
            samples,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.split,
            self.protocol_name,
            self.count,
            cell(self.l2[0]),
            cell(self.l2[1]),
            cell(self.l2[2]),
            cell(self.ave_123),
            cell(self.ave_all),
            cell(self.collision_rate)
        )
    }

    /// Per-sample rows: scene id, e1..e6 and the collision flag.
    pub fn samples_csv(&self) -> String {
        let mut s = String::from("scene_id,e1,e2,e3,e4,e5,e6,collided\n");
        for r in &self.samples {
            s.push_str(&r.scene_id.to_string());
            for e in r.profile.errors {
                s.push_str(&format!(",{e:.6}"));
            }
            s.push_str(if r.collided { ",1\n" } else { ",0\n" });
        }
        s
    }
}

/// Text table with one row per report, in the usual results layout.
pub fn summary_table(reports: &[MetricsReport]) -> String {
    let mut s = String::from(
        "split                      protocol      n     L2 1s  L2 2s  L2 3s  Ave123  AveAll  Coll%\n",
    );
    let f = |v: f64| if v.is_finite() { format!("{:.2}", round2(v)) } else { "NA".into() };
    for r in reports {
        s.push_str(&format!(
            "{:<26} {:<13} {:<5} {:>6} {:>6} {:>6} {:>7} {:>7} {:>6}\n",
            r.split,
            r.protocol_name,
            r.count,
            f(r.l2[0]),
            f(r.l2[1]),
            f(r.l2[2]),
            f(r.ave_123),
            f(r.ave_all),
            f(r.collision_rate)
        ));
    }
    s
}

/// Runs `plan` on every scene in order and aggregates under `protocol`.
pub fn evaluate<F>(scenes: &[&Scene], split: &str, kind: ProtocolKind, protocol: EvalProtocol, mut plan: F) -> Result<MetricsReport>
where
    F: FnMut(&Scene) -> Result<Trajectory>,
{
    let mut samples = Vec::with_capacity(scenes.len());
    for s in scenes {
        let pred = plan(s)?;
        samples.push(SampleResult {
            scene_id: s.id,
            profile: l2_profile(pred.waypoints(), &s.ego.gt_traj, protocol.timestep_mode)?,
            collided: collides_on_grid(&pred, s, protocol.collision_resolution),
        });
    }
    Ok(MetricsReport::from_samples(split, &kind.to_string(), protocol, samples))
}

/// Elementwise max of the two branches' features.
pub fn fuse_features(vision: &[f64], language: &[f64]) -> Result<Vec<f64>> {
    if vision.len() != language.len() {
        return Err(Error::Contract(format!(
            "feature widths differ after projection: {} vs {}",
            vision.len(),
            language.len()
        )));
    }
    Ok(vision.iter().zip(language).map(|(a, b)| a.max(*b)).collect())
}
