//! Dense arrays, a reverse-mode tape, transformer building blocks and AdamW.

mod array;
mod gradcheck;
pub mod nn;
mod optim;
mod params;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, param_grad_check, primitive_check, GradCheckReport, DEFAULT_STEP, PRIMITIVE_CASES};
pub use optim::{adamw_step, adamw_step_frozen, cosine_lr, AdamWConfig, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tape::{AttnMask, Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("index {index} out of range (bound {bound})")]
    Index { index: usize, bound: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violated: {0}")]
    Contract(String),
}
