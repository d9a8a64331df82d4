//! Two-stage training: the vision branch alone, then both branches jointly
//! with the language, surrogate and distillation losses.

mod checkpoint;

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::encoder::TokenVars;
use crate::language::{answer_targets, scene_qa, vqa_loss, QaCategory, Segment};
use crate::model::Model;
use crate::numerics::{adamw_step_frozen, AdamWConfig, Array, NumericsError, OptimizerState, ParamId, ParamStore, Tape, Var};
use crate::planner::{planning_loss, PlanningLossConfig};
use crate::surrogate::{
    apply_edit, edit_loss, edit_qa, future_loss, propose_edit, recon_loss, EditOp, FutureTargets, MaskSpec,
};
use crate::world::{rasterize_bev, OccupancyGrid, Scene};
use crate::{Error, Result};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Stage::One),
            2 => Some(Stage::Two),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub planning: f64,
    pub llm: f64,
    pub recon: f64,
    pub future: f64,
    pub distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            planning: 1.0,
            llm: 1.0,
            recon: 1.0,
            future: 1.0,
            distill: 1.0,
        }
    }
}

impl LossWeights {
    pub fn from_run(run: &RunConfig) -> Self {
        Self {
            planning: run.w_planning,
            llm: run.w_llm,
            recon: run.w_recon,
            future: run.w_future,
            distill: run.w_distill,
        }
    }
}

/// Graph nodes of the weighted terms; language terms are absent in stage 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub planning: Var,
    pub llm: Option<Var>,
    pub recon: Option<Var>,
    pub future: Option<Var>,
    pub distill: Option<Var>,
}

/// Weighted sum of the terms. With `require_all`, a missing language
/// term is a contract error.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights, require_all: bool) -> Result<Var> {
    let named = [
        ("llm", terms.llm, w.llm),
        ("recon", terms.recon, w.recon),
        ("future", terms.future, w.future),
        ("distill", terms.distill, w.distill),
    ];
    let mut total = tape.scale(terms.planning, w.planning)?;
    for (name, term, weight) in named {
        match term {
            Some(v) => {
                let s = tape.scale(v, weight)?;
                total = tape.add(total, s)?;
            }
            None if require_all => return Err(Error::Contract(format!("stage-2 loss is missing the {name} term"))),
            None => {}
        }
    }
    Ok(total)
}

/// KL(P_llm || P_vis) between softmax distributions of the planner's
/// penultimate feature and the projected language ego feature.
pub fn distill_loss(tape: &mut Tape, vision: Var, language: Var, temperature: f64, stop_llm: bool) -> Result<Var> {
    if tape.value(vision).shape() != tape.value(language).shape() {
        return Err(Error::Contract(format!(
            "distillation widths differ: {:?} vs {:?}",
            tape.value(vision).shape(),
            tape.value(language).shape()
        )));
    }
    let v = tape.scale(vision, 1.0 / temperature)?;
    let l = tape.scale(language, 1.0 / temperature)?;
    let p_vis = tape.softmax(v)?;
    let mut p_llm = tape.softmax(l)?;
    if stop_llm {
        p_llm = tape.detach(p_llm);
    }
    Ok(tape.kl_divergence(p_llm, p_vis)?)
}

/// Batch-mean loss values of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub planning: f64,
    pub llm: f64,
    pub recon: f64,
    pub future: f64,
    pub distill: f64,
    /// Scene-edit contribution, already inside `planning`.
    pub edit: f64,
    pub total: f64,
    pub lr: f64,
    pub weights: LossWeights,
}

pub const LOSS_HEADER: &str = "step,planning,llm,recon,future,distill,edit,total,lr";

impl LossReport {
    pub fn weighted_total(&self) -> f64 {
        let w = &self.weights;
        w.planning * self.planning + w.llm * self.llm + w.recon * self.recon + w.future * self.future + w.distill * self.distill
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.planning, self.llm, self.recon, self.future, self.distill, self.edit, self.total, self.lr
        )
    }
}

/// Scenes with their rasters for the current and two future frames.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub scenes: Vec<Scene>,
    grids: Vec<[OccupancyGrid; 3]>,
}

impl TrainingData {
    pub fn new(scenes: Vec<Scene>, grid: &crate::world::GridSpec) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let grids = scenes
            .iter()
            .map(|s| -> Result<[OccupancyGrid; 3]> {
                Ok([
                    rasterize_bev(s, grid)?,
                    rasterize_bev(&s.frame(1), grid)?,
                    rasterize_bev(&s.frame(2), grid)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scenes, grids })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Weights, optimizer and sampling state of one stage in progress.
#[derive(Clone, Debug)]
pub struct Session {
    pub run: RunConfig,
    pub model: Model,
    pub stage: Stage,
    pub step: u64,
    pub optimizer: OptimizerState,
    /// Picks batch scenes.
    data_rng: ChaCha8Rng,
    /// Draws questions, masks and edits.
    aux_rng: ChaCha8Rng,
    /// Sorted, for the warm-up freeze.
    vision_ids: Vec<ParamId>,
}

fn sorted_vision(model: &Model) -> Vec<ParamId> {
    let mut ids = model.vision_params();
    ids.sort();
    ids
}

fn stage_rng(seed: u64, stage: Stage, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    r.set_stream(10 * stage.number() as u64 + stream);
    r
}

impl Session {
    /// Fresh weights, vision parameters only.
    pub fn stage1(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let model = Model::new(run.model_config(), run.seed)?;
        let optimizer = OptimizerState::new(
            AdamWConfig {
                lr: run.stage1_lr,
                weight_decay: run.weight_decay,
                total_steps: run.stage1_steps,
                ..AdamWConfig::default()
            },
            &model.store,
            model.vision_params(),
        );
        let vision_ids = sorted_vision(&model);
        Ok(Self {
            vision_ids,
            run: run.clone(),
            model,
            stage: Stage::One,
            step: 0,
            optimizer,
            data_rng: stage_rng(run.seed, Stage::One, 1),
            aux_rng: stage_rng(run.seed, Stage::One, 2),
        })
    }

    /// Joint stage from a stage-1 checkpoint. The checkpoint must have been
    /// written under the same config unless `force` is set.
    pub fn stage2(run: &RunConfig, stage1: &Checkpoint, force: bool) -> Result<Self> {
        run.validate()?;
        if stage1.stage != Stage::One {
            return Err(Error::Checkpoint(format!("expected a stage-1 checkpoint, got stage {}", stage1.stage)));
        }
        stage1.check_config(run, force)?;
        let mut model = Model::new(run.model_config(), run.seed)?;
        model.copy_params(&stage1.store, &[])?;
        let params = if run.mllm { model.all_params() } else { model.vision_params() };
        let optimizer = OptimizerState::new(
            AdamWConfig {
                lr: run.stage2_lr,
                weight_decay: run.weight_decay,
                total_steps: run.stage2_steps,
                ..AdamWConfig::default()
            },
            &model.store,
            params,
        );
        let vision_ids = sorted_vision(&model);
        Ok(Self {
            vision_ids,
            run: run.clone(),
            model,
            stage: Stage::Two,
            step: 0,
            optimizer,
            data_rng: stage_rng(run.seed, Stage::Two, 1),
            aux_rng: stage_rng(run.seed, Stage::Two, 2),
        })
    }

    pub fn total_steps(&self) -> u64 {
        match self.stage {
            Stage::One => self.run.stage1_steps,
            Stage::Two => self.run.stage2_steps,
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn batch(&self) -> usize {
        match self.stage {
            Stage::One => self.run.stage1_batch,
            Stage::Two => self.run.stage2_batch,
        }
    }

    fn joint(&self) -> bool {
        self.stage == Stage::Two && self.run.mllm
    }

    /// Builds the loss graph of one batch without updating anything.
    pub fn loss_graph(&mut self, tape: &mut Tape, data: &TrainingData) -> Result<(Var, LossReport)> {
        let batch = self.batch();
        let mut sums = [0.0f64; 6];
        let mut parts: Vec<LossTerms> = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = self.data_rng.gen_range(0..data.len());
            let (terms, values) = scene_terms(tape, &self.model, &self.model.store, &self.run, self.joint(), data, i, &mut self.aux_rng, None)?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
            parts.push(terms);
        }
        let n = batch as f64;
        let mean = |tape: &mut Tape, get: &dyn Fn(&LossTerms) -> Option<Var>| -> Result<Option<Var>> {
            let vars: Vec<Var> = parts.iter().filter_map(get).collect();
            if vars.is_empty() {
                return Ok(None);
            }
            let mut acc = vars[0];
            for &v in &vars[1..] {
                acc = tape.add(acc, v)?;
            }
            Ok(Some(tape.scale(acc, 1.0 / n)?))
        };
        let terms = LossTerms {
            planning: mean(tape, &|t| Some(t.planning))?.expect("batch is nonempty"),
            llm: mean(tape, &|t| t.llm)?,
            recon: mean(tape, &|t| t.recon)?,
            future: mean(tape, &|t| t.future)?,
            distill: mean(tape, &|t| t.distill)?,
        };
        let weights = LossWeights::from_run(&self.run);
        let total = total_loss(tape, &terms, &weights, self.joint())?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let report = LossReport {
            step: self.step,
            planning: value(Some(terms.planning)),
            llm: value(terms.llm),
            recon: value(terms.recon),
            future: value(terms.future),
            distill: value(terms.distill),
            edit: sums[5] / n,
            total: tape.value(total).item(),
            lr: self.optimizer.current_lr(),
            weights,
        };
        Ok((total, report))
    }

    /// One optimizer step; returns the losses measured before the update.
    pub fn train_step(&mut self, data: &TrainingData) -> Result<LossReport> {
        let mut tape = Tape::new(self.step);
        let step = self.step;
        let diverged = |e: Error| match e {
            Error::Numerics(NumericsError::NonFinite(_)) => Error::Divergence {
                step,
                detail: e.to_string(),
            },
            other => other,
        };
        let (total, report) = self.loss_graph(&mut tape, data).map_err(diverged)?;
        if !report.total.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                detail: format!("total loss is {} ({report:?})", report.total),
            });
        }
        let grads = tape.backward(total).map_err(|e| diverged(e.into()))?;
        let warming = self.joint() && self.step < self.run.stage2_warmup;
        let vision = &self.vision_ids;
        adamw_step_frozen(&mut self.model.store, grads.params(), &mut self.optimizer, |id| {
            warming && vision.binary_search(&id).is_ok()
        })?;
        self.step += 1;
        Ok(report)
    }

    /// Trains until the stage budget is spent, calling `on_step` after each
    /// update.
    pub fn run<F>(&mut self, data: &TrainingData, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Session, &LossReport) -> Result<()>,
    {
        while !self.is_done() {
            let report = self.train_step(data)?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.run.canonical(),
            config_hash: self.run.hash(),
            stage: self.stage,
            step: self.step,
            store: self.model.store.clone(),
            optimizer: Some(self.optimizer.clone()),
            rngs: vec![RngState::of(&self.data_rng), RngState::of(&self.aux_rng)],
        }
    }

    /// Continues a stage from a checkpoint written by `checkpoint`.
    pub fn resume(run: &RunConfig, ckpt: &Checkpoint, force: bool) -> Result<Self> {
        run.validate()?;
        ckpt.check_config(run, force)?;
        let mut model = Model::new(run.model_config(), run.seed)?;
        model.copy_params(&ckpt.store, &[])?;
        let optimizer = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        if optimizer.params.iter().any(|p| p.index() >= model.store.len()) {
            return Err(Error::Checkpoint("optimizer refers to unknown parameters".into()));
        }
        let [data, aux] = ckpt.rngs.as_slice() else {
            return Err(Error::Checkpoint(format!("expected 2 rng states, found {}", ckpt.rngs.len())));
        };
        let vision_ids = sorted_vision(&model);
        Ok(Self {
            vision_ids,
            run: run.clone(),
            model,
            stage: ckpt.stage,
            step: ckpt.step,
            optimizer,
            data_rng: data.restore(),
            aux_rng: aux.restore(),
        })
    }
}

pub fn loss_csv_path(run: &RunConfig, stage: Stage) -> std::path::PathBuf {
    run.out_path(&format!("loss_stage{stage}.csv"))
}

pub fn checkpoint_path(run: &RunConfig, stage: Stage) -> std::path::PathBuf {
    run.out_path(&format!("stage{stage}.ckpt"))
}

fn keep_rows_before(path: &Path, step: u64) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Runs one stage with its artifacts under `run.out_dir`: the loss CSV,
/// periodic checkpoints and the final checkpoint. With `resume`, an
/// existing checkpoint of the stage is continued and the CSV is cut back to
/// the steps it covers.
pub fn train_stage(run: &RunConfig, stage: Stage, resume: bool, data: &TrainingData) -> Result<Session> {
    std::fs::create_dir_all(&run.out_dir).map_err(|e| Error::io(Path::new(&run.out_dir), e))?;
    let ckpt_path = checkpoint_path(run, stage);
    let csv_path = loss_csv_path(run, stage);
    let mut session = if resume && ckpt_path.exists() {
        Session::resume(run, &Checkpoint::load(&ckpt_path)?, false)?
    } else {
        match stage {
            Stage::One => Session::stage1(run)?,
            Stage::Two => {
                let s1 = checkpoint_path(run, Stage::One);
                if !s1.exists() {
                    return Err(Error::NotFound(format!("stage-1 checkpoint {}", s1.display())));
                }
                Session::stage2(run, &Checkpoint::load(&s1)?, false)?
            }
        }
    };
    let head = if session.step > 0 && csv_path.exists() {
        keep_rows_before(&csv_path, session.step)?
    } else {
        format!("{LOSS_HEADER}\n")
    };
    std::fs::write(&csv_path, head).map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = std::fs::OpenOptions::new()
        .append(true)
        .open(&csv_path)
        .map_err(|e| Error::io(&csv_path, e))?;
    let every = run.checkpoint_every;
    session.run(data, |s, report| {
        writeln!(csv, "{}", report.csv_row()).map_err(|e| Error::io(&csv_path, e))?;
        if every > 0 && s.step % every == 0 && !s.is_done() {
            s.checkpoint().save(&ckpt_path)?;
        }
        Ok(())
    })?;
    session.checkpoint().save(&ckpt_path)?;
    Ok(session)
}

/// Loss values of a constant `Array` pair, for reports outside training.
pub fn distill_value(vision: &Array, language: &Array, temperature: f64) -> Result<f64> {
    let mut tape = Tape::inference();
    let v = tape.constant(vision.clone());
    let l = tape.constant(language.clone());
    let d = distill_loss(&mut tape, v, l, temperature, false)?;
    Ok(tape.value(d).item())
}

/// Loss terms of one training scene, plus their values with the edit term
/// last. Stage 1 and the vision-only ablation leave the language terms out.
/// The stop-gradient targets of the reconstruction and future terms.
#[derive(Clone, Debug, PartialEq)]
pub struct DetachedTargets {
    pub clean_bev: Array,
    pub future: FutureTargets,
}

fn future_targets(m: &Model, store: &ParamStore, data: &TrainingData, i: usize) -> Result<FutureTargets> {
    let mut t = Tape::inference();
    let next = m.encoder.bev(&mut t, store, &data.grids[i][1])?;
    let next2 = m.encoder.bev(&mut t, store, &data.grids[i][2])?;
    Ok(FutureTargets {
        next: t.value(next).clone(),
        next2: t.value(next2).clone(),
    })
}

impl DetachedTargets {
    /// Targets of scene `i` under `store`. Passing them to `scene_terms`
    /// keeps them fixed while the store is perturbed.
    pub fn compute(model: &Model, store: &ParamStore, data: &TrainingData, i: usize) -> Result<Self> {
        let mut t = Tape::inference();
        let tokens = model.encoder.forward(&mut t, store, &data.scenes[i], &data.grids[i][0])?;
        Ok(Self {
            clean_bev: t.value(tokens.b).clone(),
            future: future_targets(model, store, data, i)?,
        })
    }
}

#[allow(clippy::too_many_arguments)]
pub fn scene_terms(
    tape: &mut Tape,
    model: &Model,
    store: &ParamStore,
    run: &RunConfig,
    joint: bool,
    data: &TrainingData,
    i: usize,
    rng: &mut ChaCha8Rng,
    pinned: Option<&DetachedTargets>,
) -> Result<(LossTerms, [f64; 6])> {
    let m = model;
    let scene = &data.scenes[i];
    let plan_cfg = PlanningLossConfig {
        lambda_col: run.lambda_col,
        margin: run.collision_margin,
    };
    let obstacles = scene.obstacles_per_step();

    let tokens = m.encoder.forward(tape, store, scene, &data.grids[i][0])?;
    let (wp, pen) = m.planner.forward(tape, store, &tokens)?;
    let mut planning = planning_loss(tape, wp, &scene.ego.gt_traj, &obstacles, &plan_cfg)?;
    if run.w_aux > 0.0 {
        let aux = m.encoder.auxiliary_loss(tape, store, scene, &tokens)?;
        let aux = tape.scale(aux, run.w_aux)?;
        planning = tape.add(planning, aux)?;
    }
    if !joint {
        let v = tape.value(planning).item();
        let terms = LossTerms {
            planning,
            llm: None,
            recon: None,
            future: None,
            distill: None,
        };
        return Ok((terms, [v, 0.0, 0.0, 0.0, 0.0, 0.0]));
    }

    let ratio = rng.gen_range(run.mask_ratio_min..=run.mask_ratio_max);
    let spec = MaskSpec::new(ratio, rng.gen())?;
    let (masked_b, masked_rows) = m.masker.apply(tape, store, tokens.b, &spec)?;
    let masked = TokenVars { b: masked_b, ..tokens };
    let [ab, ae, aa, am] = m.branch.adapt_parts(tape, store, &masked)?;
    let adapted = m.branch.assemble(tape, ab, ae, aa, am)?;

    let mut segments = Vec::with_capacity(QaCategory::SCENE.len());
    for cat in QaCategory::SCENE {
        let qa = scene_qa(scene, cat, rng)?;
        let (q, a) = qa.ids(&m.vocab)?;
        segments.push(Segment::new(&m.vocab, &q, &a));
    }
    let layout = m.branch.prompt_layout();
    let out = m.branch.lm.forward(tape, store, adapted.prompt, &layout, &segments)?;
    let mut llm = vqa_loss(tape, out.logits, &answer_targets(&out.layout, &segments))?;
    let slots = m.branch.slots(tape, &out)?;

    let recon_pred = m.branch.head_recon(tape, store, slots.bev)?;
    let clean = match pinned {
        Some(p) => tape.constant(p.clean_bev.clone()),
        None => tape.detach(tokens.b),
    };
    let rows = run.recon_masked_only.then_some(masked_rows.as_slice());
    let recon = recon_loss(tape, recon_pred, clean, rows)?;

    let targets = match pinned {
        Some(p) => p.future.clone(),
        None => future_targets(m, store, data, i)?,
    };
    let (f1, f2) = m.branch.head_future(tape, store, slots.bev)?;
    let future = future_loss(tape, f1, f2, &targets)?;

    let feature = m.branch.ego_feature(tape, store, slots.ego)?;
    let distill = distill_loss(tape, pen, feature, run.distill_temperature, run.distill_stop_llm)?;
    let ego_wp = m.branch.decode_ego(tape, store, feature)?;
    let ego_plan = planning_loss(tape, ego_wp, &scene.ego.gt_traj, &obstacles, &plan_cfg)?;
    planning = tape.add(planning, ego_plan)?;

    let mut edit_value = 0.0;
    if run.edit {
        let seed = rng.gen();
        if let Ok(op) = propose_edit(scene, m.config.grid.extent, seed) {
            let edited = apply_edit(scene, &op)?;
            let edited_a = match &op {
                EditOp::Add { .. } => {
                    let added = edited.agents.last().expect("an agent was added");
                    let tok = m.encoder.agent_token(tape, store, added, scene.agents.len())?;
                    tape.concat_rows(&[tokens.a, tok])?
                }
                EditOp::Remove { agent } => {
                    let keep: Vec<usize> = (0..scene.agents.len()).filter(|&j| scene.agents[j].id != agent.id).collect();
                    tape.gather_rows(tokens.a, &keep)?
                }
            };
            let ea = m.branch.adapt_agents(tape, store, edited_a)?;
            let edit_prompt = m.branch.assemble(tape, ab, ae, ea, am)?;
            let qa = edit_qa(&op, &edited)?;
            let (q, a) = qa.ids(&m.vocab)?;
            let seg = [Segment::new(&m.vocab, &q, &a)];
            let eo = m.branch.lm.forward(tape, store, edit_prompt.prompt, &layout, &seg)?;
            let edit_llm = vqa_loss(tape, eo.logits, &answer_targets(&eo.layout, &seg))?;
            let sum = tape.add(llm, edit_llm)?;
            llm = tape.scale(sum, 0.5)?;

            let es = m.branch.slots(tape, &eo)?;
            let edit_wp = m.branch.head_edit(tape, store, es.agent)?;
            let gt = tape.constant(crate::planner::Trajectory::new(scene.ego.gt_traj.clone())?.to_array());
            let anchor = tape.l2_loss(edit_wp, gt)?;
            let penalty = edit_loss(tape, edit_wp, &edited, run.collision_margin)?;
            let penalty = tape.scale(penalty, run.lambda_col)?;
            let edit_term = tape.add(anchor, penalty)?;
            edit_value = tape.value(edit_term).item();
            planning = tape.add(planning, edit_term)?;
        }
    }

    let v = |x: Var| tape.value(x).item();
    let values = [v(planning), v(llm), v(recon), v(future), v(distill), edit_value];
    let terms = LossTerms {
        planning,
        llm: Some(llm),
        recon: Some(recon),
        future: Some(future),
        distill: Some(distill),
    };
    Ok((terms, values))
}
