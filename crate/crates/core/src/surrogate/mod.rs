//! Surrogate objectives on the shared scene tokens: masked BEV
//! reconstruction, future BEV prediction and scene editing.

mod edit;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::Encoder;
use crate::numerics::{Array, ParamId, ParamStore, Tape, Var};
use crate::world::{rasterize_bev, GridSpec, Scene};
use crate::{Error, Result};

pub use edit::{
    apply_edit, blocks_corridor, edit_loss, edit_qa, ego_corridor, propose_add, propose_edit, propose_remove,
    relative_side, EditKind, EditOp, CORRIDOR_MARGIN, PLACEMENT_RADIUS,
};

pub const MASK_RATIO_RANGE: (f64, f64) = (0.2, 0.4);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(ratio: f64, seed: u64) -> Result<Self> {
        let (lo, hi) = MASK_RATIO_RANGE;
        if !(lo..=hi).contains(&ratio) {
            return Err(Error::Config(format!("mask ratio {ratio} outside [{lo}, {hi}]")));
        }
        Ok(Self { ratio, seed })
    }

    /// Number of rows masked out of `n`.
    pub fn count(&self, n: usize) -> usize {
        // guard against 0.25 * 32 landing a hair above 8
        let raw = self.ratio * n as f64;
        ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
    }

    /// Sorted row indices to mask, sampled without replacement.
    pub fn indices(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut idx = sample(&mut rng, n, self.count(n)).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// The learned embedding that replaces masked BEV rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Masker {
    embed: ParamId,
}

impl Masker {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            embed: store.init_normal("surrogate.mask", &[1, d], 0.5, rng)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, b: Var, spec: &MaskSpec) -> Result<(Var, Vec<usize>)> {
        let spec = MaskSpec::new(spec.ratio, spec.seed)?;
        let n = tape.value(b).rows();
        let idx = spec.indices(n);
        let mut which = vec![false; n];
        for &i in &idx {
            which[i] = true;
        }
        let m = tape.param(store, self.embed);
        Ok((tape.replace_rows(b, m, &which)?, idx))
    }
}

/// Mean-square error between reconstructed and clean BEV tokens. With
/// `rows` given, only those rows are compared.
pub fn recon_loss(tape: &mut Tape, pred: Var, target: Var, rows: Option<&[usize]>) -> Result<Var> {
    match rows {
        None => Ok(tape.l2_loss(pred, target)?),
        Some(idx) => {
            if tape.value(pred).shape() != tape.value(target).shape() {
                return Err(crate::numerics::NumericsError::Dimension(format!(
                    "reconstruction {:?} vs target {:?}",
                    tape.value(pred).shape(),
                    tape.value(target).shape()
                ))
                .into());
            }
            let p = tape.gather_rows(pred, idx)?;
            let t = tape.gather_rows(target, idx)?;
            Ok(tape.l2_loss(p, t)?)
        }
    }
}

/// BEV tokens one and two steps ahead.
#[derive(Clone, Debug, PartialEq)]
pub struct FutureTargets {
    pub next: Array,
    pub next2: Array,
}

/// Frames t, t+1, t+2 of a scene advanced by its own dynamics.
pub fn frame_window(scene: &Scene) -> Vec<Scene> {
    (0..3).map(|k| scene.frame(k)).collect()
}

/// Encodes frames t+1 and t+2 with the current weights on an inference
/// tape, so the targets carry no gradient.
pub fn future_targets(encoder: &Encoder, store: &ParamStore, frames: &[Scene], grid: &GridSpec) -> Result<FutureTargets> {
    if frames.len() < 3 {
        return Err(Error::Contract(format!("future targets need 3 frames, got {}", frames.len())));
    }
    let bev = |s: &Scene| -> Result<Array> {
        let g = rasterize_bev(s, grid)?;
        let mut tape = Tape::inference();
        let b = encoder.bev(&mut tape, store, &g)?;
        Ok(tape.value(b).clone())
    };
    Ok(FutureTargets {
        next: bev(&frames[1])?,
        next2: bev(&frames[2])?,
    })
}

/// Sum of the two future-token regression terms.
pub fn future_loss(tape: &mut Tape, next: Var, next2: Var, targets: &FutureTargets) -> Result<Var> {
    let a = tape.constant(targets.next.clone());
    let b = tape.constant(targets.next2.clone());
    let la = tape.l2_loss(next, a)?;
    let lb = tape.l2_loss(next2, b)?;
    Ok(tape.add(la, lb)?)
}
