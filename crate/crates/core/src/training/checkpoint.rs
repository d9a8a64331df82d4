use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Stage;
use crate::config::RunConfig;
use crate::numerics::{AdamWConfig, Array, OptimizerState, ParamId, ParamStore};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DIMACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// Everything needed to continue or reuse a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    /// Hex SHA-256 of `config_text`.
    pub config_hash: String,
    pub stage: Stage,
    pub step: u64,
    pub store: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub rngs: Vec<RngState>,
}

fn bad(m: impl Into<String>) -> Error {
    Error::Checkpoint(m.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("string is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<Array> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(bad(format!("tensor rank {ndim} is implausible")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor size overflows"))?;
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(bad("truncated checkpoint"));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Array::new(shape, data).map_err(|e| bad(e.to_string()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, a: &Array) {
    out.extend((a.shape().len() as u32).to_le_bytes());
    for &d in a.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in a.data() {
        out.extend(v.to_le_bytes());
    }
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(bad("config hash must be 64 hex digits"));
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad("config hash is not hex"))?;
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend(unhex(&self.config_hash)?);
        put_str(&mut out, &self.config_text);
        out.push(self.stage.number());
        out.extend(self.step.to_le_bytes());

        out.extend((self.rngs.len() as u32).to_le_bytes());
        for r in &self.rngs {
            out.extend(r.seed);
            out.extend(r.stream.to_le_bytes());
            out.extend(r.word_pos.to_le_bytes());
        }

        out.extend((self.store.len() as u32).to_le_bytes());
        for (name, value) in self.store.iter() {
            put_str(&mut out, name);
            put_tensor(&mut out, value);
        }

        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                let c = &o.config;
                for v in [c.lr, c.weight_decay, c.beta1, c.beta2, c.eps] {
                    out.extend(v.to_le_bytes());
                }
                out.extend(c.total_steps.to_le_bytes());
                out.extend(o.step.to_le_bytes());
                out.extend((o.params.len() as u32).to_le_bytes());
                for ((p, m), v) in o.params.iter().zip(&o.m).zip(&o.v) {
                    out.extend((p.index() as u32).to_le_bytes());
                    put_tensor(&mut out, m);
                    put_tensor(&mut out, v);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = crate::config::hex(&r.array::<32>()?);
        let config_text = r.string()?;
        let stage = Stage::from_number(r.u8()?).ok_or_else(|| bad("unknown stage"))?;
        let step = r.u64()?;

        let n_rng = r.u32()? as usize;
        let mut rngs = Vec::with_capacity(n_rng.min(16));
        for _ in 0..n_rng {
            rngs.push(RngState {
                seed: r.array()?,
                stream: r.u64()?,
                word_pos: r.u128()?,
            });
        }

        let n_params = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n_params {
            let name = r.string()?;
            let value = r.tensor()?;
            store.insert(&name, value).map_err(|e| bad(e.to_string()))?;
        }

        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let mut f = [0.0; 5];
                for v in &mut f {
                    *v = r.f64()?;
                }
                let config = AdamWConfig {
                    lr: f[0],
                    weight_decay: f[1],
                    beta1: f[2],
                    beta2: f[3],
                    eps: f[4],
                    total_steps: r.u64()?,
                };
                let ostep = r.u64()?;
                let n = r.u32()? as usize;
                let (mut params, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
                for _ in 0..n {
                    let idx = r.u32()? as usize;
                    if idx >= store.len() {
                        return Err(bad(format!("optimizer slot refers to parameter {idx} of {}", store.len())));
                    }
                    let id = ParamId(idx);
                    let (mi, vi) = (r.tensor()?, r.tensor()?);
                    if mi.shape() != store.get(id).shape() || vi.shape() != store.get(id).shape() {
                        return Err(bad(format!("optimizer moments of {} have the wrong shape", store.name(id))));
                    }
                    params.push(id);
                    m.push(mi);
                    v.push(vi);
                }
                Some(OptimizerState {
                    config,
                    step: ostep,
                    params,
                    m,
                    v,
                })
            }
            b => return Err(bad(format!("bad optimizer flag {b}"))),
        };
        if r.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            config_text,
            config_hash,
            stage,
            step,
            store,
            optimizer,
            rngs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The run config stored with the weights.
    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_text)
    }

    /// A model built from the stored config with the stored weights.
    pub fn model(&self) -> Result<crate::model::Model> {
        let run = self.run_config()?;
        let mut model = crate::model::Model::new(run.model_config(), run.seed)?;
        model.copy_params(&self.store, &[])?;
        Ok(model)
    }

    /// Refuses a checkpoint written under a different config unless forced.
    pub fn check_config(&self, run: &RunConfig, force: bool) -> Result<()> {
        let hash = run.hash();
        if hash != self.config_hash && !force {
            return Err(bad(format!(
                "config hash mismatch: checkpoint {}, current {} (use force to load anyway)",
                &self.config_hash[..12],
                &hash[..12]
            )));
        }
        Ok(())
    }
}
