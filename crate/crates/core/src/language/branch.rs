use std::ops::Range;

use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocabulary, BOS, EOS, SEP};
use crate::encoder::{BeamTokens, TokenVars};
use crate::model::ModelConfig;
use crate::numerics::nn::{Block, Linear, Mlp3, Norm};
use crate::numerics::{Array, AttnMask, ParamId, ParamStore, Tape, Var};
use crate::world::HORIZON;
use crate::{Error, Result};

/// Learned queries cross-attending one token set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    queries: ParamId,
    input: Linear,
    block: Block,
    out: Linear,
    null: ParamId,
}

impl Adapter {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            queries: store.init_normal(&format!("{name}.queries"), &[cfg.n_q, cfg.d_l], 0.5, rng)?,
            input: Linear::new(store, &format!("{name}.input"), cfg.d, cfg.d_l, rng)?,
            block: Block::new(store, &format!("{name}.block"), cfg.d_l, cfg.d_l, cfg.lm_heads, cfg.lm_ff, rng)?,
            out: Linear::new(store, &format!("{name}.out"), cfg.d_l, cfg.d_l, rng)?,
            null: store.init_normal(&format!("{name}.null"), &[1, cfg.d], 0.5, rng)?,
        })
    }

    /// Always `n_q` rows; an empty input is replaced by the learned null token.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let x = if tape.value(x).rows() == 0 {
            tape.param(store, self.null)
        } else {
            x
        };
        let ctx = self.input.forward(tape, store, x)?;
        let q = tape.param(store, self.queries);
        let h = self.block.cross_attend(tape, store, q, ctx, None)?;
        Ok(self.out.forward(tape, store, h)?)
    }
}

/// Row ranges of each token set inside the LM prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    pub bev: Range<usize>,
    pub ego: Range<usize>,
    pub agent: Range<usize>,
    pub map: Range<usize>,
    /// Agent rows before subsampling.
    pub agent_full: usize,
}

impl PromptLayout {
    pub fn len(&self) -> usize {
        self.map.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row of the subsampled sequence that full agent row `i` duplicates.
    pub fn upsample_index(&self, i: usize) -> usize {
        i * self.agent.len() / self.agent_full
    }
}

/// Adapter outputs: the full `4 n_q` sequence and the LM prompt built from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Adapted {
    /// `[BEV | Ego | Agent | Map]`, `n_q` rows each.
    pub full: Var,
    /// Same with the agent segment subsampled.
    pub prompt: Var,
}

/// Positions of one packed sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub prompt: PromptLayout,
    /// First row of each text segment.
    pub segment_starts: Vec<usize>,
    pub segment_lens: Vec<usize>,
    pub rows: usize,
}

/// Decoder outputs: logits for every row and the hidden states fed to the
/// final norm, with the layout that locates each slot.
#[derive(Clone, Debug, PartialEq)]
pub struct LmOutput {
    pub logits: Var,
    pub hidden: Var,
    pub layout: SequenceLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    embed: ParamId,
    positions: ParamId,
    blocks: Vec<Block>,
    norm: Norm,
    out: Linear,
    pub context: usize,
}

/// A question/answer turned into ids: `<bos> q <sep> a <eos>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub ids: Vec<usize>,
    /// Index of `<sep>` within `ids`.
    pub sep: usize,
}

impl Segment {
    pub fn new(vocab: &Vocabulary, question: &[usize], answer: &[usize]) -> Self {
        let mut ids = vec![vocab.special(BOS)];
        ids.extend_from_slice(question);
        let sep = ids.len();
        ids.push(vocab.special(SEP));
        ids.extend_from_slice(answer);
        ids.push(vocab.special(EOS));
        Self { ids, sep }
    }

    /// Prompt for generation: `<bos> q <sep>`.
    pub fn question_only(vocab: &Vocabulary, question: &[usize]) -> Self {
        let mut ids = vec![vocab.special(BOS)];
        ids.extend_from_slice(question);
        let sep = ids.len();
        ids.push(vocab.special(SEP));
        Self { ids, sep }
    }
}

/// (row, next-token) pairs for teacher-forced answer prediction.
pub fn answer_targets(layout: &SequenceLayout, segments: &[Segment]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (seg, &start) in segments.iter().zip(&layout.segment_starts) {
        for k in seg.sep..seg.ids.len() - 1 {
            out.push((start + k, seg.ids[k + 1]));
        }
    }
    out
}

impl LanguageModel {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let blocks = (0..cfg.lm_layers)
            .map(|i| Block::new(store, &format!("lm.block{i}"), cfg.d_l, cfg.d_l, cfg.lm_heads, cfg.lm_ff, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            embed: store.init_normal("lm.embed", &[vocab_size, cfg.d_l], 0.3, rng)?,
            positions: store.init_normal("lm.positions", &[cfg.context, cfg.d_l], 0.1, rng)?,
            blocks,
            norm: Norm::new(store, "lm.norm", cfg.d_l)?,
            out: Linear::new(store, "lm.out", cfg.d_l, vocab_size, rng)?,
            context: cfg.context,
        })
    }

    /// Runs the decoder over `prompt` followed by packed text segments. Each
    /// segment sees the prompt and its own past, and its positions restart
    /// right after the prompt, so packing is equivalent to separate passes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prompt: Var,
        layout: &PromptLayout,
        segments: &[Segment],
    ) -> Result<LmOutput> {
        let p = tape.value(prompt).rows();
        if p != layout.len() {
            return Err(Error::Contract(format!("prompt has {p} rows, layout says {}", layout.len())));
        }
        let total: usize = p + segments.iter().map(|s| s.ids.len()).sum::<usize>();
        let longest = p + segments.iter().map(|s| s.ids.len()).max().unwrap_or(0);
        if total > self.context || longest > self.context {
            return Err(Error::Capacity(format!(
                "sequence of {total} rows exceeds the {}-position context",
                self.context
            )));
        }
        let vocab = store.get(self.embed).rows();
        let mut ids = Vec::new();
        let mut pos: Vec<usize> = (0..p).collect();
        let mut owner = vec![usize::MAX; p];
        let mut starts = Vec::new();
        for (si, s) in segments.iter().enumerate() {
            starts.push(p + ids.len());
            for (k, &t) in s.ids.iter().enumerate() {
                if t >= vocab {
                    return Err(Error::Vocabulary(format!("token id {t} outside vocabulary of {vocab}")));
                }
                ids.push(t);
                pos.push(p + k);
                owner.push(si);
            }
        }
        let n = pos.len();
        let mut allowed = vec![false; n * n];
        for r in 0..n {
            for c in 0..=r {
                allowed[r * n + c] = c < p || owner[c] == owner[r];
            }
        }
        let mask = AttnMask::new(n, n, allowed)?;

        let x = if ids.is_empty() {
            prompt
        } else {
            let table = tape.param(store, self.embed);
            let words = tape.gather_rows(table, &ids)?;
            tape.concat_rows(&[prompt, words])?
        };
        let table = tape.param(store, self.positions);
        let pe = tape.gather_rows(table, &pos)?;
        let mut h = tape.add(x, pe)?;
        for blk in &self.blocks {
            h = blk.self_attend(tape, store, h, Some(&mask))?;
        }
        let normed = self.norm.forward(tape, store, h)?;
        let logits = self.out.forward(tape, store, normed)?;
        Ok(LmOutput {
            logits,
            hidden: h,
            layout: SequenceLayout {
                prompt: layout.clone(),
                segment_starts: starts,
                segment_lens: segments.iter().map(|s| s.ids.len()).collect(),
                rows: n,
            },
        })
    }
}

/// Cross-entropy over the listed (row, target) pairs only.
pub fn vqa_loss(tape: &mut Tape, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
    let rows = tape.value(logits).rows();
    if targets.is_empty() {
        return Err(Error::Contract("no answer positions".into()));
    }
    if let Some(&(r, _)) = targets.iter().find(|(r, _)| *r >= rows) {
        return Err(Error::Contract(format!("answer row {r} outside {rows} logits rows")));
    }
    let idx: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let labels: Vec<usize> = targets.iter().map(|t| t.1).collect();
    let picked = tape.gather_rows(logits, &idx)?;
    Ok(tape.cross_entropy(picked, &labels)?)
}

/// BEV slot hiddens expanded back to one row per BEV token.
#[derive(Clone, Debug, PartialEq)]
pub struct GridHead {
    expand: ParamId,
    mlp: Mlp3,
}

impl GridHead {
    fn new(store: &mut ParamStore, name: &str, tokens: usize, cfg: &ModelConfig, out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            expand: store.init_normal(&format!("{name}.expand"), &[tokens, cfg.n_q], 1.0 / (cfg.n_q as f64).sqrt(), rng)?,
            mlp: Mlp3::new(store, &format!("{name}.mlp"), [cfg.d_l, cfg.d_l, cfg.d_l, out], rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, bev_hidden: Var) -> Result<Var> {
        let e = tape.param(store, self.expand);
        let x = tape.matmul(e, bev_hidden)?;
        Ok(self.mlp.forward(tape, store, x)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageBranch {
    pub n_q: usize,
    pub d: usize,
    pub agent_keep: usize,
    adapters: [Adapter; 4],
    pub lm: LanguageModel,
    recon: GridHead,
    future: GridHead,
    edit: Mlp3,
    ego: Mlp3,
    project: Linear,
    waypoint_scale: f64,
}

/// Slot rows taken from a hidden sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slots {
    pub bev: Var,
    pub ego: Var,
    /// Upsampled back to `n_q` rows.
    pub agent: Var,
}

impl LanguageBranch {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, vocab_size: usize, bev_tokens: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let adapters = [
            Adapter::new(store, "adapt.bev", cfg, rng)?,
            Adapter::new(store, "adapt.ego", cfg, rng)?,
            Adapter::new(store, "adapt.agent", cfg, rng)?,
            Adapter::new(store, "adapt.map", cfg, rng)?,
        ];
        let lm = LanguageModel::new(store, cfg, vocab_size, rng)?;
        let recon = GridHead::new(store, "head.recon", bev_tokens, cfg, cfg.d, rng)?;
        let future = GridHead::new(store, "head.future", bev_tokens, cfg, 2 * cfg.d, rng)?;
        let edit = Mlp3::new(store, "head.edit", [cfg.n_q * cfg.d_l, 64, 64, 2 * HORIZON], rng)?;
        let ego = Mlp3::new(store, "head.ego", [cfg.d, 64, 64, 2 * HORIZON], rng)?;
        // identity on the first d coordinates
        let mut w = vec![0.0; cfg.d_l * cfg.d];
        for i in 0..cfg.d.min(cfg.d_l) {
            w[i * cfg.d + i] = 1.0;
        }
        let pw = store.insert("distill.project.w", Array::new(vec![cfg.d_l, cfg.d], w)?)?;
        let pb = store.init_const("distill.project.b", &[cfg.d], 0.0)?;
        let project = Linear {
            w: pw,
            b: Some(pb),
            fan_in: cfg.d_l,
            fan_out: cfg.d,
        };
        let agent_keep = ((cfg.n_q as f64 * cfg.agent_fraction).ceil() as usize).clamp(1, cfg.n_q);
        Ok(Self {
            n_q: cfg.n_q,
            d: cfg.d,
            agent_keep,
            adapters,
            lm,
            recon,
            future,
            edit,
            ego,
            project,
            waypoint_scale: cfg.waypoint_scale,
        })
    }

    pub fn prompt_layout(&self) -> PromptLayout {
        let q = self.n_q;
        PromptLayout {
            bev: 0..q,
            ego: q..2 * q,
            agent: 2 * q..2 * q + self.agent_keep,
            map: 2 * q + self.agent_keep..3 * q + self.agent_keep,
            agent_full: q,
        }
    }

    fn subsample(&self) -> Vec<usize> {
        (0..self.agent_keep).map(|j| j * self.n_q / self.agent_keep).collect()
    }

    /// Per-component adapters over the token sets.
    pub fn adapt(&self, tape: &mut Tape, store: &ParamStore, tokens: &TokenVars) -> Result<Adapted> {
        let [b, e, a, m] = self.adapt_parts(tape, store, tokens)?;
        self.assemble(tape, b, e, a, m)
    }

    /// The four adapter outputs `[B, E, A, M]` before assembly.
    pub fn adapt_parts(&self, tape: &mut Tape, store: &ParamStore, tokens: &TokenVars) -> Result<[Var; 4]> {
        Ok([
            self.adapters[0].forward(tape, store, tokens.b)?,
            self.adapters[1].forward(tape, store, tokens.e)?,
            self.adapt_agents(tape, store, tokens.a)?,
            self.adapters[3].forward(tape, store, tokens.m)?,
        ])
    }

    pub fn adapt_agents(&self, tape: &mut Tape, store: &ParamStore, a: Var) -> Result<Var> {
        self.adapters[2].forward(tape, store, a)
    }

    /// Builds the full sequence and the prompt from adapter outputs.
    pub fn assemble(&self, tape: &mut Tape, b: Var, e: Var, a: Var, m: Var) -> Result<Adapted> {
        let full = tape.concat_rows(&[b, e, a, m])?;
        let sub = tape.gather_rows(a, &self.subsample())?;
        let prompt = tape.concat_rows(&[b, e, sub, m])?;
        Ok(Adapted { full, prompt })
    }

    /// `adapt` on plain tokens, returning the full `4 n_q` sequence.
    pub fn adapt_values(&self, store: &ParamStore, tokens: &BeamTokens) -> Result<(Array, PromptLayout)> {
        let mut tape = Tape::inference();
        let vars = TokenVars::constants(tokens, &mut tape);
        let out = self.adapt(&mut tape, store, &vars)?;
        Ok((tape.value(out.full).clone(), self.prompt_layout()))
    }

    pub fn slots(&self, tape: &mut Tape, out: &LmOutput) -> Result<Slots> {
        let l = &out.layout.prompt;
        let bev = tape.slice_rows(out.hidden, l.bev.start, l.bev.end)?;
        let ego = tape.slice_rows(out.hidden, l.ego.start, l.ego.end)?;
        let idx: Vec<usize> = (0..l.agent_full).map(|i| l.agent.start + l.upsample_index(i)).collect();
        let agent = tape.gather_rows(out.hidden, &idx)?;
        Ok(Slots { bev, ego, agent })
    }

    pub fn head_recon(&self, tape: &mut Tape, store: &ParamStore, bev_hidden: Var) -> Result<Var> {
        self.recon.forward(tape, store, bev_hidden)
    }

    /// Returns (next-step, two-step) BEV predictions.
    pub fn head_future(&self, tape: &mut Tape, store: &ParamStore, bev_hidden: Var) -> Result<(Var, Var)> {
        let y = self.future.forward(tape, store, bev_hidden)?;
        let a = tape.slice_cols(y, 0, self.d)?;
        let b = tape.slice_cols(y, self.d, 2 * self.d)?;
        Ok((a, b))
    }

    pub fn head_edit(&self, tape: &mut Tape, store: &ParamStore, agent_hidden: Var) -> Result<Var> {
        let n = tape.value(agent_hidden).len();
        let flat = tape.reshape(agent_hidden, &[1, n])?;
        let y = self.edit.forward(tape, store, flat)?;
        self.waypoints(tape, y)
    }

    /// Projected ego feature: mean over ego slots, mapped to planner width.
    pub fn ego_feature(&self, tape: &mut Tape, store: &ParamStore, ego_hidden: Var) -> Result<Var> {
        let pooled = tape.mean_rows(ego_hidden)?;
        Ok(self.project.forward(tape, store, pooled)?)
    }

    /// Waypoints from a projected ego feature.
    pub fn decode_ego(&self, tape: &mut Tape, store: &ParamStore, feature: Var) -> Result<Var> {
        let y = self.ego.forward(tape, store, feature)?;
        self.waypoints(tape, y)
    }

    pub fn head_ego(&self, tape: &mut Tape, store: &ParamStore, ego_hidden: Var) -> Result<Var> {
        let f = self.ego_feature(tape, store, ego_hidden)?;
        self.decode_ego(tape, store, f)
    }

    fn waypoints(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        let y = tape.scale(y, self.waypoint_scale)?;
        Ok(tape.reshape(y, &[HORIZON, 2])?)
    }

    /// Greedy decoding of an answer to `question` given an adapted prompt.
    pub fn generate(
        &self,
        store: &ParamStore,
        prompt: &Array,
        vocab: &Vocabulary,
        question: &[usize],
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let layout = self.prompt_layout();
        let eos = vocab.special(EOS);
        let mut seg = Segment::question_only(vocab, question);
        let mut answer = Vec::new();
        while answer.len() < max_len {
            let mut tape = Tape::inference();
            let p = tape.constant(prompt.clone());
            let out = self.lm.forward(&mut tape, store, p, &layout, std::slice::from_ref(&seg))?;
            let logits = tape.value(out.logits);
            let last = logits.row(logits.rows() - 1);
            let next = argmax(last);
            if next == eos {
                break;
            }
            answer.push(next);
            seg.ids.push(next);
        }
        Ok(answer)
    }

    /// Prompt rows for a scene's tokens with frozen weights.
    pub fn prompt_values(&self, store: &ParamStore, tokens: &BeamTokens) -> Result<Array> {
        let mut tape = Tape::inference();
        let vars = TokenVars::constants(tokens, &mut tape);
        let out = self.adapt(&mut tape, store, &vars)?;
        Ok(tape.value(out.prompt).clone())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
