//! Parameterized building blocks composed from tape primitives.

use rand_chacha::ChaCha8Rng;

use super::{AttnMask, NumericsError, ParamId, ParamStore, Tape, Var};

type Result<T> = std::result::Result<T, NumericsError>;

/// Single-head `softmax(q k^T / sqrt(d) + mask) v`.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttnMask>,
) -> Result<Var> {
    tape.attention(q, k, v, 1, mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.init_linear(&format!("{name}.w"), fan_in, fan_out, rng)?;
        let b = store.init_const(&format!("{name}.b"), &[fan_out], 0.0)?;
        Ok(Self {
            w,
            b: Some(b),
            fan_in,
            fan_out,
        })
    }

    pub fn no_bias(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.init_linear(&format!("{name}.w"), fan_in, fan_out, rng)?;
        Ok(Self {
            w,
            b: None,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.init_const(&format!("{name}.gain"), &[width], 1.0)?,
            bias: store.init_const(&format!("{name}.bias"), &[width], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Projected multi-head attention: `out(attn(q(x), k(ctx), v(ctx)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHead {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        ctx_width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng)?,
            k: Linear::new(store, &format!("{name}.k"), ctx_width, width, rng)?,
            v: Linear::new(store, &format!("{name}.v"), ctx_width, width, rng)?,
            out: Linear::new(store, &format!("{name}.o"), width, width, rng)?,
            heads,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        ctx: Var,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, ctx)?;
        let v = self.v.forward(tape, store, ctx)?;
        let a = tape.attention(q, k, v, self.heads, mask)?;
        self.out.forward(tape, store, a)
    }
}

/// linear -> relu -> linear
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), width, hidden, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), hidden, width, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.l2.forward(tape, store, h)
    }
}

/// Pre-norm transformer block. Self-attention when called with
/// [`Block::self_attend`], cross-attention with [`Block::cross_attend`].
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    norm_x: Norm,
    norm_ctx: Norm,
    attn: MultiHead,
    norm_ff: Norm,
    ff: FeedForward,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        ctx_width: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm_x: Norm::new(store, &format!("{name}.norm_x"), width)?,
            norm_ctx: Norm::new(store, &format!("{name}.norm_ctx"), ctx_width)?,
            attn: MultiHead::new(store, &format!("{name}.attn"), width, ctx_width, heads, rng)?,
            norm_ff: Norm::new(store, &format!("{name}.norm_ff"), width)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), width, ff_hidden, rng)?,
        })
    }

    pub fn self_attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let h = self.norm_x.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h, mask)?;
        let x = tape.add(x, a)?;
        self.feed_forward(tape, store, x)
    }

    pub fn cross_attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        ctx: Var,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let h = self.norm_x.forward(tape, store, x)?;
        let c = if tape.value(ctx).rows() == 0 {
            ctx
        } else {
            self.norm_ctx.forward(tape, store, ctx)?
        };
        let a = self.attn.forward(tape, store, h, c, mask)?;
        let x = tape.add(x, a)?;
        self.feed_forward(tape, store, x)
    }

    fn feed_forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm_ff.forward(tape, store, x)?;
        let f = self.ff.forward(tape, store, h)?;
        tape.add(x, f)
    }
}

/// Three linear layers with ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp3 {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl Mlp3 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 4],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), dims[0], dims[1], rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), dims[1], dims[2], rng)?,
            l3: Linear::new(store, &format!("{name}.l3"), dims[2], dims[3], rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let h = self.l2.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        self.l3.forward(tape, store, h)
    }
}

/// Fixed 2-D sinusoidal encoding for a `rows x cols` grid, row-major.
pub fn grid_positional_encoding(rows: usize, cols: usize, width: usize) -> Vec<f64> {
    let quarter = (width / 4).max(1);
    let mut out = vec![0.0; rows * cols * width];
    for r in 0..rows {
        for c in 0..cols {
            let base = (r * cols + c) * width;
            for i in 0..quarter {
                let freq = 1.0 / 100f64.powf(i as f64 / quarter as f64);
                let slots = [
                    (r as f64 * freq).sin(),
                    (r as f64 * freq).cos(),
                    (c as f64 * freq).sin(),
                    (c as f64 * freq).cos(),
                ];
                for (s, v) in slots.iter().enumerate() {
                    let j = s * quarter + i;
                    if j < width {
                        out[base + j] = *v;
                    }
                }
            }
        }
    }
    out
}
