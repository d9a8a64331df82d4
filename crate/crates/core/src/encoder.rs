//! Scene tokenizer: BEV, ego, agent and map embeddings from learned queries
//! cross-attending a rasterized bird's-eye view.

use rand_chacha::ChaCha8Rng;

use crate::model::ModelConfig;
use crate::numerics::nn::{grid_positional_encoding, Block, Linear};
use crate::numerics::{Array, ParamId, ParamStore, Tape, Var};
use crate::world::{rasterize_bev, Agent, MapPolyline, OccupancyGrid, Scene, CHANNELS, HORIZON};
use crate::{Error, Result};

/// Meters per unit in agent decoder outputs.
pub const AGENT_SCALE: f64 = 10.0;
/// Meters per unit in map endpoint outputs.
pub const MAP_SCALE: f64 = 16.0;
pub const AGENT_FEATURES: usize = 11;
pub const MAP_FEATURES: usize = 9;
pub const AGENT_OUTPUTS: usize = 2 + 2 * HORIZON;
pub const MAP_CLASSES: usize = 3;

/// The four token sets, as plain arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamTokens {
    pub b: Array,
    pub e: Array,
    pub a: Array,
    pub m: Array,
}

/// The four token sets as tape variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenVars {
    pub b: Var,
    pub e: Var,
    pub a: Var,
    pub m: Var,
}

impl TokenVars {
    pub fn values(&self, tape: &Tape) -> BeamTokens {
        BeamTokens {
            b: tape.value(self.b).clone(),
            e: tape.value(self.e).clone(),
            a: tape.value(self.a).clone(),
            m: tape.value(self.m).clone(),
        }
    }

    pub fn constants(tokens: &BeamTokens, tape: &mut Tape) -> Self {
        Self {
            b: tape.constant(tokens.b.clone()),
            e: tape.constant(tokens.e.clone()),
            a: tape.constant(tokens.a.clone()),
            m: tape.constant(tokens.m.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub patch: usize,
    pub cells: usize,
    pub side: usize,
    pub d: usize,
    pub heads: usize,
    bev_embed: Linear,
    bev_block: Block,
    agent_bank: ParamId,
    agent_init: Linear,
    map_bank: ParamId,
    map_init: Linear,
    agent_blocks: Vec<Block>,
    map_blocks: Vec<Block>,
    ego_embed: ParamId,
    ego_init: Linear,
    ego_scene_block: Block,
    ego_bev_block: Block,
    agent_head: Linear,
    map_class_head: Linear,
    map_endpoint_head: Linear,
    positions: Array,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (cells, side) = cfg.grid_dims()?;
        let d = cfg.d;
        let patch_in = cfg.patch * cfg.patch * CHANNELS;
        let block = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            Block::new(store, name, d, d, cfg.heads, cfg.ff_hidden, rng)
        };
        let agent_blocks = (0..cfg.encoder_layers)
            .map(|i| block(store, &format!("enc.agent{i}"), rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let map_blocks = (0..cfg.encoder_layers)
            .map(|i| block(store, &format!("enc.map{i}"), rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            patch: cfg.patch,
            cells,
            side,
            d,
            heads: cfg.heads,
            bev_embed: Linear::new(store, "enc.bev_embed", patch_in, d, rng)?,
            bev_block: block(store, "enc.bev_block", rng)?,
            agent_bank: store.init_normal("enc.agent_bank", &[cfg.agent_queries, d], 0.5, rng)?,
            agent_init: Linear::new(store, "enc.agent_init", AGENT_FEATURES, d, rng)?,
            map_bank: store.init_normal("enc.map_bank", &[cfg.map_queries, d], 0.5, rng)?,
            map_init: Linear::new(store, "enc.map_init", MAP_FEATURES, d, rng)?,
            agent_blocks,
            map_blocks,
            ego_embed: store.init_normal("enc.ego_embed", &[1, d], 0.5, rng)?,
            ego_init: Linear::new(store, "enc.ego_init", 4, d, rng)?,
            ego_scene_block: block(store, "enc.ego_scene", rng)?,
            ego_bev_block: block(store, "enc.ego_bev", rng)?,
            agent_head: Linear::new(store, "enc.agent_head", d, AGENT_OUTPUTS, rng)?,
            map_class_head: Linear::new(store, "enc.map_class", d, MAP_CLASSES, rng)?,
            map_endpoint_head: Linear::new(store, "enc.map_endpoint", d, 4, rng)?,
            positions: Array::new(vec![side * side, d], grid_positional_encoding(side, side, d))?,
        })
    }

    pub fn bev_tokens(&self) -> usize {
        self.side * self.side
    }

    /// Groups grid cells into `patch x patch` tokens, row-major over patches.
    pub fn patchify(&self, grid: &OccupancyGrid) -> Result<Array> {
        if grid.size != self.cells {
            return Err(Error::Contract(format!(
                "grid has {} cells per side, encoder expects {}",
                grid.size, self.cells
            )));
        }
        let p = self.patch;
        let width = p * p * CHANNELS;
        let mut data = Vec::with_capacity(self.bev_tokens() * width);
        for pr in 0..self.side {
            for pc in 0..self.side {
                for r in 0..p {
                    for c in 0..p {
                        for ch in 0..CHANNELS {
                            data.push(grid.get(pr * p + r, pc * p + c, ch));
                        }
                    }
                }
            }
        }
        Ok(Array::new(vec![self.bev_tokens(), width], data)?)
    }

    /// BEV tokens for a rasterized grid.
    pub fn bev(&self, tape: &mut Tape, store: &ParamStore, grid: &OccupancyGrid) -> Result<Var> {
        let patches = tape.constant(self.patchify(grid)?);
        let x = self.bev_embed.forward(tape, store, patches)?;
        let pe = tape.constant(self.positions.clone());
        let x = tape.add(x, pe)?;
        Ok(self.bev_block.self_attend(tape, store, x, None)?)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, scene: &Scene, grid: &OccupancyGrid) -> Result<TokenVars> {
        let agent_capacity = store.get(self.agent_bank).rows();
        if scene.agents.len() > agent_capacity {
            return Err(Error::Capacity(format!(
                "{} agents exceed the {agent_capacity}-query bank",
                scene.agents.len()
            )));
        }
        let map_capacity = store.get(self.map_bank).rows();
        if scene.map.len() > map_capacity {
            return Err(Error::Capacity(format!(
                "{} polylines exceed the {map_capacity}-query bank",
                scene.map.len()
            )));
        }
        let b = self.bev(tape, store, grid)?;

        let rank = scene.agent_rank();
        let feats: Vec<f64> = scene.agents.iter().flat_map(agent_features).collect();
        let a = self.queries(tape, store, self.agent_bank, &self.agent_init, &rank, feats, AGENT_FEATURES)?;
        let a = self.refine(tape, store, &self.agent_blocks, a, b)?;

        let idx: Vec<usize> = (0..scene.map.len()).collect();
        let feats: Vec<f64> = scene.map.iter().flat_map(map_features).collect();
        let m = self.queries(tape, store, self.map_bank, &self.map_init, &idx, feats, MAP_FEATURES)?;
        let m = self.refine(tape, store, &self.map_blocks, m, b)?;

        let e = self.ego_query(tape, store, &scene.ego.speeds)?;
        let am = tape.concat_rows(&[a, m])?;
        let e = self.ego_scene_block.cross_attend(tape, store, e, am, None)?;
        let e = self.ego_bev_block.cross_attend(tape, store, e, b, None)?;
        Ok(TokenVars { b, e, a, m })
    }

    #[allow(clippy::too_many_arguments)]
    fn queries(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bank: ParamId,
        init: &Linear,
        slots: &[usize],
        feats: Vec<f64>,
        width: usize,
    ) -> Result<Var> {
        let bank = tape.param(store, bank);
        let rows = tape.gather_rows(bank, slots)?;
        let f = tape.constant(Array::new(vec![slots.len(), width], feats)?);
        let f = init.forward(tape, store, f)?;
        Ok(tape.add(rows, f)?)
    }

    fn refine(&self, tape: &mut Tape, store: &ParamStore, blocks: &[Block], mut x: Var, b: Var) -> Result<Var> {
        if tape.value(x).rows() == 0 {
            return Ok(x);
        }
        for blk in blocks {
            x = blk.cross_attend(tape, store, x, b, None)?;
        }
        Ok(x)
    }

    fn ego_query(&self, tape: &mut Tape, store: &ParamStore, speeds: &[f64]) -> Result<Var> {
        let mut hist = [0.0; 4];
        for (slot, v) in hist.iter_mut().rev().zip(speeds.iter().rev()) {
            *slot = v / AGENT_SCALE;
        }
        let h = tape.constant(Array::new(vec![1, 4], hist.to_vec())?);
        let h = self.ego_init.forward(tape, store, h)?;
        let base = tape.param(store, self.ego_embed);
        Ok(tape.add(base, h)?)
    }

    /// Agent rows to (t0 position, 6-step trajectory) in meters.
    pub fn decode_agents(&self, tape: &mut Tape, store: &ParamStore, a: Var) -> Result<Var> {
        let y = self.agent_head.forward(tape, store, a)?;
        Ok(tape.scale(y, AGENT_SCALE)?)
    }

    /// Map rows to (class logits, endpoints in meters).
    pub fn decode_map(&self, tape: &mut Tape, store: &ParamStore, m: Var) -> Result<(Var, Var)> {
        let logits = self.map_class_head.forward(tape, store, m)?;
        let ends = self.map_endpoint_head.forward(tape, store, m)?;
        Ok((logits, tape.scale(ends, MAP_SCALE)?))
    }

    /// Auxiliary perception/prediction/mapping loss in normalized units.
    pub fn auxiliary_loss(&self, tape: &mut Tape, store: &ParamStore, scene: &Scene, tokens: &TokenVars) -> Result<Var> {
        let mut terms = Vec::new();
        if !scene.agents.is_empty() {
            let pred = self.decode_agents(tape, store, tokens.a)?;
            let pred = tape.scale(pred, 1.0 / AGENT_SCALE)?;
            let target: Vec<f64> = scene.agents.iter().flat_map(agent_targets).map(|v| v / AGENT_SCALE).collect();
            let target = tape.constant(Array::new(vec![scene.agents.len(), AGENT_OUTPUTS], target)?);
            terms.push(tape.l2_loss(pred, target)?);
        }
        if !scene.map.is_empty() {
            let (logits, ends) = self.decode_map(tape, store, tokens.m)?;
            let classes: Vec<usize> = scene.map.iter().map(|l| l.kind.index()).collect();
            terms.push(tape.cross_entropy(logits, &classes)?);
            let ends = tape.scale(ends, 1.0 / MAP_SCALE)?;
            let target: Vec<f64> = scene.map.iter().flat_map(map_endpoints).map(|v| v / MAP_SCALE).collect();
            let target = tape.constant(Array::new(vec![scene.map.len(), 4], target)?);
            terms.push(tape.l2_loss(ends, target)?);
        }
        match terms.len() {
            0 => Ok(tape.constant(Array::scalar(0.0)?)),
            _ => {
                let mut total = terms[0];
                for &t in &terms[1..] {
                    total = tape.add(total, t)?;
                }
                Ok(total)
            }
        }
    }

    /// Encodes a scene with frozen weights.
    pub fn encode(&self, store: &ParamStore, scene: &Scene, grid_spec: &crate::world::GridSpec) -> Result<BeamTokens> {
        let grid = rasterize_bev(scene, grid_spec)?;
        let mut tape = Tape::inference();
        let t = self.forward(&mut tape, store, scene, &grid)?;
        Ok(t.values(&tape))
    }

    /// Learned embedding for an agent that enters the scene after encoding.
    pub fn agent_token(&self, tape: &mut Tape, store: &ParamStore, agent: &Agent, slot: usize) -> Result<Var> {
        let bank = tape.param(store, self.agent_bank);
        let slot = slot.min(store.get(self.agent_bank).rows() - 1);
        let row = tape.gather_rows(bank, &[slot])?;
        let f = tape.constant(Array::new(vec![1, AGENT_FEATURES], agent_features(agent))?);
        let f = self.agent_init.forward(tape, store, f)?;
        Ok(tape.add(row, f)?)
    }
}

/// Normalized t = 0 state: position, heading, speed, size, category.
pub fn agent_features(a: &Agent) -> Vec<f64> {
    let p = a.position_at(0);
    let mut f = vec![
        p[0] / MAP_SCALE,
        p[1] / MAP_SCALE,
        a.heading.cos(),
        a.heading.sin(),
        a.speed / AGENT_SCALE,
        a.size[0] / 5.0,
        a.size[1] / 5.0,
    ];
    let mut onehot = [0.0; 4];
    onehot[a.category.index()] = 1.0;
    f.extend_from_slice(&onehot);
    f
}

/// Kind one-hot plus first, middle and last points.
pub fn map_features(l: &MapPolyline) -> Vec<f64> {
    let mut f = vec![0.0; MAP_CLASSES];
    f[l.kind.index()] = 1.0;
    let n = l.points.len();
    for p in [l.points[0], l.points[n / 2], l.points[n - 1]] {
        f.push(p[0] / MAP_SCALE);
        f.push(p[1] / MAP_SCALE);
    }
    f
}

/// Decoder targets: t = 0 position then the 6-step trajectory, in meters.
pub fn agent_targets(a: &Agent) -> Vec<f64> {
    let mut t = a.position_at(0).to_vec();
    for p in &a.trajectory {
        t.extend_from_slice(p);
    }
    t
}

pub fn map_endpoints(l: &MapPolyline) -> Vec<f64> {
    let (a, b) = (l.points[0], l.points[l.points.len() - 1]);
    vec![a[0], a[1], b[0], b[1]]
}
