//! Planning transformer: the ego token attends to the scene and is decoded
//! into six waypoints.

use rand_chacha::ChaCha8Rng;

use crate::encoder::{BeamTokens, TokenVars};
use crate::geometry::{OrientedRect, Point};
use crate::model::ModelConfig;
use crate::numerics::nn::{Block, Linear, Norm};
use crate::numerics::{Array, ParamStore, Tape, Var};
use crate::world::{Scene, HORIZON};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory(Vec<Point>);

impl Trajectory {
    pub fn new(waypoints: Vec<Point>) -> Result<Self> {
        if waypoints.len() != HORIZON {
            return Err(Error::Contract(format!(
                "trajectory needs {HORIZON} waypoints, got {}",
                waypoints.len()
            )));
        }
        if waypoints.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Contract("trajectory has a non-finite waypoint".into()));
        }
        Ok(Self(waypoints))
    }

    pub fn from_array(a: &Array) -> Result<Self> {
        if a.len() != 2 * HORIZON {
            return Err(Error::Contract(format!("expected {} values, got {}", 2 * HORIZON, a.len())));
        }
        Self::new(a.data().chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn waypoints(&self) -> &[Point] {
        &self.0
    }

    pub fn to_array(&self) -> Array {
        Array::from_rows(&self.0.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).expect("6x2 finite")
    }
}

/// Hidden state of the ego slot just before the waypoint projection.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannerFeatures {
    pub penultimate: Array,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanningLossConfig {
    pub lambda_col: f64,
    pub margin: f64,
}

impl Default for PlanningLossConfig {
    fn default() -> Self {
        Self {
            lambda_col: 1.0,
            margin: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Planner {
    blocks: Vec<Block>,
    norm: Norm,
    out: Linear,
    pub waypoint_scale: f64,
}

impl Planner {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let blocks = (0..cfg.planner_blocks)
            .map(|i| Block::new(store, &format!("plan.block{i}"), cfg.d, cfg.d, cfg.heads, cfg.ff_hidden, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            blocks,
            norm: Norm::new(store, "plan.norm", cfg.d)?,
            out: Linear::new(store, "plan.out", cfg.d, 2 * HORIZON, rng)?,
            waypoint_scale: cfg.waypoint_scale,
        })
    }

    /// Returns (waypoints 6x2, penultimate 1xd).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: &TokenVars) -> Result<(Var, Var)> {
        let ctx = tape.concat_rows(&[tokens.a, tokens.m, tokens.b])?;
        let mut x = tokens.e;
        for blk in &self.blocks {
            x = blk.cross_attend(tape, store, x, ctx, None)?;
        }
        let pen = self.norm.forward(tape, store, x)?;
        let wp = self.decode(tape, store, pen)?;
        Ok((wp, pen))
    }

    /// Final projection from a penultimate vector to waypoints.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, pen: Var) -> Result<Var> {
        let y = self.out.forward(tape, store, pen)?;
        let y = tape.scale(y, self.waypoint_scale)?;
        Ok(tape.reshape(y, &[HORIZON, 2])?)
    }

    pub fn plan(&self, store: &ParamStore, tokens: &BeamTokens) -> Result<(Trajectory, PlannerFeatures)> {
        let mut tape = Tape::inference();
        let vars = TokenVars::constants(tokens, &mut tape);
        let (wp, pen) = self.forward(&mut tape, store, &vars)?;
        Ok((
            Trajectory::from_array(tape.value(wp))?,
            PlannerFeatures {
                penultimate: tape.value(pen).clone(),
            },
        ))
    }
}

/// Waypoint L2 plus the clearance penalty against per-step obstacles.
pub fn planning_loss(
    tape: &mut Tape,
    pred: Var,
    gt: &[Point],
    obstacles: &[Vec<OrientedRect>],
    cfg: &PlanningLossConfig,
) -> Result<Var> {
    let target = tape.constant(Trajectory::new(gt.to_vec())?.to_array());
    let l2 = tape.l2_loss(pred, target)?;
    let pen = tape.clearance_penalty(pred, obstacles, cfg.margin)?;
    let pen = tape.scale(pen, cfg.lambda_col)?;
    Ok(tape.add(l2, pen)?)
}

/// `planning_loss` on plain values against the scene's own agents.
pub fn planning_loss_value(pred: &Trajectory, scene: &Scene, cfg: &PlanningLossConfig) -> Result<f64> {
    let mut tape = Tape::inference();
    let p = tape.constant(pred.to_array());
    let l = planning_loss(&mut tape, p, &scene.ego.gt_traj, &scene.obstacles_per_step(), cfg)?;
    Ok(tape.value(l).item())
}
