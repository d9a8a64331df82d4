//! Joint training of a vision planner and a small multimodal language model
//! over a synthetic driving world.
//!
//! The vision branch (scene encoder + planner head) is trained first, then
//! jointly with the language branch through surrogate tasks and a feature
//! distillation loss. Only the vision branch is needed at inference.

pub mod config;
pub mod encoder;
pub mod eval;
pub mod geometry;
pub mod language;
pub mod model;
pub mod numerics;
pub mod planner;
pub mod report;
pub mod surrogate;
pub mod training;
pub mod world;

use numerics::NumericsError;
use world::WorldError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}
