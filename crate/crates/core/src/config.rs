//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Unknown keys and values
//! that do not parse as the key's type are rejected. The canonical form
//! lists every key in declaration order and is what the config hash covers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::eval::ProtocolKind;
use crate::model::ModelConfig;
use crate::world::GridSpec;
use crate::{Error, Result};

trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|_| format!("expected {}, got `{s}`", stringify!($t)))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(u64, usize, bool);

impl Value for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("expected a finite number, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl Value for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl Value for ProtocolKind {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        ProtocolKind::from_str(s)
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:expr])* $name:ident : $ty:ty = $default:expr, )*) => {
        /// Every tunable of a run.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = <$ty as Value>::parse_value(value)
                            .map_err(|e| Error::Config(format!("key `{key}`: {e}")))?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($name), Value::render(&self.$name)) ),*]
            }
        }
    };
}

run_config! {
    seed: u64 = 0,
    train_data: String = "data/train.jsonl".into(),
    val_data: String = "data/val.jsonl".into(),
    out_dir: String = "runs/default".into(),

    grid_resolution: f64 = 1.0,
    grid_extent: f64 = 16.0,
    patch: usize = 4,
    d: usize = 32,
    heads: usize = 4,
    ff_hidden: usize = 64,
    agent_queries: usize = 16,
    map_queries: usize = 16,
    encoder_layers: usize = 2,
    planner_blocks: usize = 2,
    waypoint_scale: f64 = 10.0,
    n_q: usize = 8,
    d_l: usize = 64,
    lm_layers: usize = 2,
    lm_heads: usize = 4,
    lm_ff: usize = 128,
    context: usize = 256,
    agent_fraction: f64 = 0.5,

    stage1_steps: u64 = 2000,
    stage1_batch: usize = 8,
    stage1_lr: f64 = 1e-3,
    stage2_steps: u64 = 1500,
    stage2_batch: usize = 2,
    stage2_lr: f64 = 5e-4,
    /// Initial joint steps that update only the language branch.
    stage2_warmup: u64 = 300,
    weight_decay: f64 = 0.01,
    /// Steps between checkpoint writes; 0 writes only at the end.
    checkpoint_every: u64 = 500,

    w_planning: f64 = 1.0,
    w_llm: f64 = 1.0,
    w_recon: f64 = 1.0,
    w_future: f64 = 1.0,
    w_distill: f64 = 1.0,
    /// Weight of the encoder's perception and map terms inside the planning loss.
    w_aux: f64 = 1.0,
    lambda_col: f64 = 1.0,
    collision_margin: f64 = 1.0,

    mask_ratio_min: f64 = 0.2,
    mask_ratio_max: f64 = 0.4,
    recon_masked_only: bool = false,
    distill_temperature: f64 = 1.0,
    distill_stop_llm: bool = false,
    /// Language-branch losses in stage 2; off leaves planning alone.
    mllm: bool = true,
    edit: bool = true,

    protocol: ProtocolKind = ProtocolKind::Standardized,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: key `{key}` repeated", i + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key in declaration order, one per line.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            grid: GridSpec {
                resolution: self.grid_resolution,
                extent: self.grid_extent,
            },
            patch: self.patch,
            d: self.d,
            heads: self.heads,
            ff_hidden: self.ff_hidden,
            agent_queries: self.agent_queries,
            map_queries: self.map_queries,
            encoder_layers: self.encoder_layers,
            planner_blocks: self.planner_blocks,
            waypoint_scale: self.waypoint_scale,
            n_q: self.n_q,
            d_l: self.d_l,
            lm_layers: self.lm_layers,
            lm_heads: self.lm_heads,
            lm_ff: self.lm_ff,
            context: self.context,
            agent_fraction: self.agent_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        let (lo, hi) = crate::surrogate::MASK_RATIO_RANGE;
        if !(lo <= self.mask_ratio_min && self.mask_ratio_min <= self.mask_ratio_max && self.mask_ratio_max <= hi) {
            return bad(format!("mask ratios must satisfy {lo} <= min <= max <= {hi}"));
        }
        if self.stage1_batch == 0 || self.stage2_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.stage1_lr <= 0.0 || self.stage2_lr <= 0.0 || self.weight_decay < 0.0 {
            return bad("learning rates must be positive and weight decay nonnegative".into());
        }
        if self.distill_temperature <= 0.0 {
            return bad("distill_temperature must be positive".into());
        }
        for (k, w) in [
            ("w_planning", self.w_planning),
            ("w_llm", self.w_llm),
            ("w_recon", self.w_recon),
            ("w_future", self.w_future),
            ("w_distill", self.w_distill),
            ("w_aux", self.w_aux),
            ("lambda_col", self.lambda_col),
        ] {
            if w < 0.0 {
                return bad(format!("{k} must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn out_path(&self, file: &str) -> PathBuf {
        Path::new(&self.out_dir).join(file)
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
