use super::{Array, NumericsError, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Length of the cosine schedule; the rate reaches 0 here.
    pub total_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: 1,
        }
    }
}

/// Cosine annealing from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub params: Vec<ParamId>,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl OptimizerState {
    /// Zero moments for the given parameters.
    pub fn new(config: AdamWConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let m: Vec<Array> = params.iter().map(|&p| Array::zeros(store.get(p).shape())).collect();
        Self {
            config,
            step: 0,
            params,
            v: m.clone(),
            m,
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.config.lr, self.step, self.config.total_steps)
    }
}

/// One decoupled-weight-decay Adam update. Parameters tracked by `state`
/// without an entry in `grads` are updated with a zero gradient. Returns the
/// learning rate that was applied.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Array)],
    state: &mut OptimizerState,
) -> Result<f64, NumericsError> {
    adamw_step_frozen(store, grads, state, |_| false)
}

/// `adamw_step` that leaves the parameters selected by `frozen` and their
/// moments untouched. The step counter still advances.
pub fn adamw_step_frozen<F: Fn(ParamId) -> bool>(
    store: &mut ParamStore,
    grads: &[(ParamId, Array)],
    state: &mut OptimizerState,
    frozen: F,
) -> Result<f64, NumericsError> {
    let c = state.config;
    let lr = state.current_lr();
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (slot, &pid) in state.params.iter().enumerate() {
        if frozen(pid) {
            continue;
        }
        let g = grads.iter().find(|(id, _)| *id == pid).map(|(_, g)| g);
        let shape = store.get(pid).shape().to_vec();
        if let Some(g) = g {
            if g.shape() != shape.as_slice() {
                return Err(NumericsError::Dimension(format!(
                    "gradient {:?} for parameter {} of shape {shape:?}",
                    g.shape(),
                    store.name(pid)
                )));
            }
        }
        let m = state.m[slot].data_mut();
        let v = state.v[slot].data_mut();
        let p = store.get_mut(pid).data_mut();
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * (c.weight_decay * p[i] + mhat / (vhat.sqrt() + c.eps));
        }
    }
    state.step += 1;
    Ok(lr)
}
