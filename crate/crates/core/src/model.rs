//! Model dimensions and the assembled two-branch network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{BeamTokens, Encoder};
use crate::eval::fuse_features;
use crate::language::{builtin_vocabulary, LanguageBranch, Vocabulary};
use crate::numerics::{Array, ParamId, ParamStore, Tape};
use crate::planner::{Planner, PlannerFeatures, Trajectory};
use crate::surrogate::Masker;
use crate::world::{GridSpec, Scene};

/// Architecture hyperparameters shared by both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid: GridSpec,
    /// Edge of the square cell patch embedded as one BEV token.
    pub patch: usize,
    pub d: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub agent_queries: usize,
    pub map_queries: usize,
    pub encoder_layers: usize,
    pub planner_blocks: usize,
    /// Meters per unit of the planner's raw output.
    pub waypoint_scale: f64,
    pub n_q: usize,
    pub d_l: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_ff: usize,
    pub context: usize,
    pub agent_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            patch: 4,
            d: 32,
            heads: 4,
            ff_hidden: 64,
            agent_queries: 16,
            map_queries: 16,
            encoder_layers: 2,
            planner_blocks: 2,
            waypoint_scale: 10.0,
            n_q: 8,
            d_l: 64,
            lm_layers: 2,
            lm_heads: 4,
            lm_ff: 128,
            context: 256,
            agent_fraction: 0.5,
        }
    }
}

impl ModelConfig {
    /// Cells per side and BEV tokens per side.
    pub fn grid_dims(&self) -> crate::Result<(usize, usize)> {
        let cells = self.grid.validate(crate::world::EGO_SIZE)?;
        if self.patch == 0 || cells % self.patch != 0 {
            return Err(crate::Error::Config(format!(
                "patch {} does not tile a {cells}-cell grid",
                self.patch
            )));
        }
        Ok((cells, cells / self.patch))
    }

    pub fn bev_tokens(&self) -> crate::Result<usize> {
        let (_, side) = self.grid_dims()?;
        Ok(side * side)
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.grid_dims()?;
        let bad = |m: &str| Err(crate::Error::Config(m.to_string()));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad("d must be a positive multiple of heads");
        }
        if self.d_l == 0 || self.lm_heads == 0 || !self.d_l.is_multiple_of(self.lm_heads) {
            return bad("d_l must be a positive multiple of lm_heads");
        }
        if self.n_q == 0 || self.agent_queries == 0 || self.map_queries == 0 {
            return bad("query counts must be positive");
        }
        if !(self.agent_fraction > 0.0 && self.agent_fraction <= 1.0) {
            return bad("agent_fraction must lie in (0, 1]");
        }
        if !(self.waypoint_scale > 0.0 && self.waypoint_scale.is_finite()) {
            return bad("waypoint_scale must be positive");
        }
        if self.encoder_layers == 0 || self.planner_blocks == 0 || self.lm_layers == 0 {
            return bad("layer counts must be positive");
        }
        Ok(())
    }
}

/// Parameter name prefixes of the vision branch (encoder + planner).
pub const VISION_PREFIXES: &[&str] = &["enc.", "plan."];

/// Both branches over one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub planner: Planner,
    pub branch: LanguageBranch,
    pub masker: Masker,
    pub vocab: Vocabulary,
}

impl Model {
    /// Fresh weights; parameters are created in a fixed order from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> crate::Result<Self> {
        config.validate()?;
        let vocab = builtin_vocabulary().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, &mut rng)?;
        let planner = Planner::new(&mut store, &config, &mut rng)?;
        let branch = LanguageBranch::new(&mut store, &config, vocab.len(), config.bev_tokens()?, &mut rng)?;
        let masker = Masker::new(&mut store, config.d, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            planner,
            branch,
            masker,
            vocab,
        })
    }

    pub fn vision_params(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix(VISION_PREFIXES)
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// Copies every parameter of `other` whose name starts with one of
    /// `prefixes` (all when empty). Names and shapes must match.
    pub fn copy_params(&mut self, other: &ParamStore, prefixes: &[&str]) -> crate::Result<()> {
        for (name, value) in other.iter() {
            if !prefixes.is_empty() && !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let id = self
                .store
                .id(name)
                .ok_or_else(|| crate::Error::Checkpoint(format!("parameter {name} not in this model")))?;
            if self.store.get(id).shape() != value.shape() {
                return Err(crate::Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    self.store.get(id).shape()
                )));
            }
            self.store.set(id, value.clone())?;
        }
        Ok(())
    }

    pub fn tokens(&self, scene: &Scene) -> crate::Result<BeamTokens> {
        self.encoder.encode(&self.store, scene, &self.config.grid)
    }

    /// Vision-only planning, the deployed path.
    pub fn plan(&self, scene: &Scene) -> crate::Result<(Trajectory, PlannerFeatures)> {
        let tokens = self.tokens(scene)?;
        self.planner.plan(&self.store, &tokens)
    }

    /// Projected ego feature and trajectory from the language branch.
    pub fn language_ego(&self, scene: &Scene) -> crate::Result<(Array, Trajectory)> {
        let tokens = self.tokens(scene)?;
        let prompt = self.branch.prompt_values(&self.store, &tokens)?;
        let mut tape = Tape::inference();
        let p = tape.constant(prompt);
        let out = self.branch.lm.forward(&mut tape, &self.store, p, &self.branch.prompt_layout(), &[])?;
        let slots = self.branch.slots(&mut tape, &out)?;
        let f = self.branch.ego_feature(&mut tape, &self.store, slots.ego)?;
        let wp = self.branch.decode_ego(&mut tape, &self.store, f)?;
        Ok((tape.value(f).clone(), Trajectory::from_array(tape.value(wp))?))
    }

    /// Greedy answer to a question about the scene.
    pub fn ask(&self, scene: &Scene, question: &str, max_len: usize) -> crate::Result<String> {
        let ids = self.vocab.encode(question)?;
        let tokens = self.tokens(scene)?;
        let prompt = self.branch.prompt_values(&self.store, &tokens)?;
        let answer = self.branch.generate(&self.store, &prompt, &self.vocab, &ids, max_len)?;
        Ok(self.vocab.decode(&answer))
    }
}

/// Max-pools the planner feature of `vision` with the projected language
/// ego feature of `mllm`, decodes the pooled vector with both final heads
/// and returns the mean of the two trajectories.
pub fn dual_inference(vision: &Model, mllm: &Model, scene: &Scene) -> crate::Result<Trajectory> {
    let (_, feats) = vision.plan(scene)?;
    let (lang, _) = mllm.language_ego(scene)?;
    dual_decode(vision, mllm, feats.penultimate.data(), lang.data())
}

/// Decoding half of `dual_inference` for given feature vectors.
pub fn dual_decode(vision: &Model, mllm: &Model, vision_feature: &[f64], language_feature: &[f64]) -> crate::Result<Trajectory> {
    let fused = fuse_features(vision_feature, language_feature)?;
    let width = fused.len();
    let mut tape = Tape::inference();
    let x = tape.constant(Array::new(vec![1, width], fused)?);
    let a = vision.planner.decode(&mut tape, &vision.store, x)?;
    let b = mllm.branch.decode_ego(&mut tape, &mllm.store, x)?;
    let sum = tape.add(a, b)?;
    let mean = tape.scale(sum, 0.5)?;
    Trajectory::from_array(tape.value(mean))
}
