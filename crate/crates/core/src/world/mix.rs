use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{generate_scene, GeneratorConfig, ScenarioKind, Scene, WorldError};

/// Scene seeds of one dataset occupy `seed * SEED_STRIDE ..`, so datasets
/// generated with different seeds never share a scene.
pub const SEED_STRIDE: u64 = 1_000_000;

/// Relative frequency of each scenario kind in a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct KindMix {
    weights: Vec<(ScenarioKind, f64)>,
}

impl Default for KindMix {
    fn default() -> Self {
        Self {
            weights: ScenarioKind::ALL.iter().map(|&k| (k, 1.0)).collect(),
        }
    }
}

impl KindMix {
    /// Parses `kind=weight,kind=weight`; kinds not listed get weight 0.
    pub fn parse(s: &str) -> Result<Self, WorldError> {
        let mut weights = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, w) = part
                .split_once('=')
                .ok_or_else(|| WorldError::Config(format!("mix entry `{part}` is not kind=weight")))?;
            let kind = ScenarioKind::parse(k.trim()).ok_or_else(|| WorldError::Config(format!("unknown scenario kind `{}`", k.trim())))?;
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| WorldError::Config(format!("mix weight `{}` is not a number", w.trim())))?;
            if !(w >= 0.0 && w.is_finite()) {
                return Err(WorldError::Config(format!("mix weight for {kind} must be nonnegative")));
            }
            if weights.iter().any(|(seen, _)| *seen == kind) {
                return Err(WorldError::Config(format!("kind {kind} listed twice in the mix")));
            }
            weights.push((kind, w));
        }
        let mix = Self { weights };
        mix.check()?;
        Ok(mix)
    }

    pub fn exclude(mut self, kind: ScenarioKind) -> Result<Self, WorldError> {
        self.weights.retain(|(k, _)| *k != kind);
        self.check()?;
        Ok(self)
    }

    pub fn weight(&self, kind: ScenarioKind) -> f64 {
        self.weights.iter().find(|(k, _)| *k == kind).map_or(0.0, |(_, w)| *w)
    }

    fn check(&self) -> Result<(), WorldError> {
        if self.weights.iter().all(|(_, w)| *w == 0.0) {
            return Err(WorldError::Config("every scenario kind has weight 0".into()));
        }
        Ok(())
    }

    /// `count` scenes with kinds drawn from the mix.
    pub fn generate(&self, count: usize, seed: u64, cfg: &GeneratorConfig) -> Result<Vec<Scene>, WorldError> {
        if count as u64 >= SEED_STRIDE {
            return Err(WorldError::Config(format!("count must stay below {SEED_STRIDE}")));
        }
        let dist = WeightedIndex::new(self.weights.iter().map(|(_, w)| *w))
            .map_err(|e| WorldError::Config(format!("bad mix: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count as u64)
            .map(|i| {
                let kind = self.weights[dist.sample(&mut rng)].0;
                generate_scene(seed.wrapping_mul(SEED_STRIDE).wrapping_add(i), kind, cfg)
            })
            .collect()
    }
}

/// Scene count per kind, in `ScenarioKind::ALL` order.
pub fn kind_counts(scenes: &[Scene]) -> Vec<(ScenarioKind, usize)> {
    ScenarioKind::ALL
        .iter()
        .map(|&k| (k, scenes.iter().filter(|s| s.kind == k).count()))
        .collect()
}
