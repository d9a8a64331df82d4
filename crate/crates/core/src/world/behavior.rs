use crate::geometry::{wrap_angle, Point};

use super::{Scene, WorldError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Motion {
    Stopped,
    GoingStraight,
    SteeringLeft,
    SteeringRight,
    Reversing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpeedClass {
    NotMoving,
    Slow,
    Moderate,
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BehaviorLabel {
    pub motion: Motion,
    pub speed: SpeedClass,
    /// Net heading change in radians, left positive.
    pub heading_change: f64,
    /// Steering between the straight threshold and `sharp_turn`.
    pub slight: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct Thresholds {
    pub straight_deg: f64,
    pub sharp_turn_deg: f64,
    pub not_moving: f64,
    pub slow: f64,
    pub moderate: f64,
    /// Backward net displacement (m) that counts as reversing.
    pub reverse_distance: f64,
    /// Segments shorter than this carry no direction.
    pub min_segment: f64,
}

pub const BEHAVIOR_THRESHOLDS: Thresholds = Thresholds {
    straight_deg: 5.0,
    sharp_turn_deg: 60.0,
    not_moving: 0.1,
    slow: 2.0,
    moderate: 6.0,
    reverse_distance: 0.5,
    min_segment: 0.05,
};

impl SpeedClass {
    pub fn of(mean_speed: f64) -> Self {
        let t = BEHAVIOR_THRESHOLDS;
        if mean_speed < t.not_moving {
            SpeedClass::NotMoving
        } else if mean_speed < t.slow {
            SpeedClass::Slow
        } else if mean_speed <= t.moderate {
            SpeedClass::Moderate
        } else {
            SpeedClass::Fast
        }
    }
}

/// Labels a trajectory whose first point is the t = 0 pose facing +x.
/// `speeds` are the per-step speeds along it.
///
/// Heading change accumulates signed turns between consecutive segment
/// directions. A turn sharper than 90 degrees is a direction cusp (switching
/// between forward and reverse), so it contributes its supplement instead.
pub fn behavior_label(traj: &[Point], speeds: &[f64]) -> Result<BehaviorLabel, WorldError> {
    if traj.len() < 2 {
        return Err(WorldError::Contract(format!(
            "behavior_label needs at least 2 waypoints, got {}",
            traj.len()
        )));
    }
    let t = BEHAVIOR_THRESHOLDS;
    let mean = if speeds.is_empty() {
        0.0
    } else {
        speeds.iter().map(|v| v.abs()).sum::<f64>() / speeds.len() as f64
    };
    let speed = SpeedClass::of(mean);

    let mut total = 0.0;
    let mut prev: Option<f64> = None;
    for w in traj.windows(2) {
        let d = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
        if d[0].hypot(d[1]) < t.min_segment {
            continue;
        }
        let h = d[1].atan2(d[0]);
        if let Some(p) = prev {
            let mut delta = wrap_angle(h - p);
            if delta.abs() > std::f64::consts::FRAC_PI_2 {
                delta -= std::f64::consts::PI.copysign(delta);
            }
            total += delta;
        }
        prev = Some(h);
    }

    let net_forward = traj[traj.len() - 1][0] - traj[0][0];
    let deg = total.to_degrees();
    let motion = if speed == SpeedClass::NotMoving {
        Motion::Stopped
    } else if net_forward < -t.reverse_distance && deg.abs() < 90.0 {
        Motion::Reversing
    } else if deg.abs() < t.straight_deg {
        Motion::GoingStraight
    } else if deg > 0.0 {
        Motion::SteeringLeft
    } else {
        Motion::SteeringRight
    };
    let slight = matches!(motion, Motion::SteeringLeft | Motion::SteeringRight) && deg.abs() <= t.sharp_turn_deg;
    Ok(BehaviorLabel {
        motion,
        speed,
        heading_change: total,
        slight,
    })
}

/// Label of the ego's ground-truth future.
pub fn ego_behavior(scene: &Scene) -> BehaviorLabel {
    let traj: Vec<Point> = std::iter::once([0.0, 0.0]).chain(scene.ego.gt_traj.iter().copied()).collect();
    behavior_label(&traj, &scene.ego.future_speeds()).expect("ego trajectory has 7 points")
}
