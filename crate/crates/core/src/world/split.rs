use super::{ego_behavior, Motion, ScenarioKind, Scene, WorldError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Full,
    /// Scenes where the ego turns: steering labels plus three-point turns.
    Targeted,
    LongTail(ScenarioKind),
}

impl std::str::FromStr for Split {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Split::Full),
            "targeted" => Ok(Split::Targeted),
            _ => s
                .strip_prefix("longtail:")
                .and_then(ScenarioKind::parse)
                .filter(|k| k.is_long_tail())
                .map(Split::LongTail)
                .ok_or_else(|| WorldError::UnknownSplit(s.to_string())),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Full => f.write_str("full"),
            Split::Targeted => f.write_str("targeted"),
            Split::LongTail(k) => write!(f, "longtail:{k}"),
        }
    }
}

impl Split {
    pub fn contains(&self, scene: &Scene) -> bool {
        match self {
            Split::Full => true,
            Split::Targeted => {
                scene.kind == ScenarioKind::ThreePointTurn
                    || matches!(ego_behavior(scene).motion, Motion::SteeringLeft | Motion::SteeringRight)
            }
            Split::LongTail(k) => scene.kind == *k,
        }
    }
}

/// Indices of the scenes in `split`, in dataset order.
pub fn select_split(scenes: &[Scene], split: Split) -> Vec<usize> {
    (0..scenes.len()).filter(|&i| split.contains(&scenes[i])).collect()
}
