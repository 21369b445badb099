//! Environments driven by the trainer.

pub mod nav2d;
pub mod tabular;

use thiserror::Error;

pub use nav2d::{EnvConfig, Nav2d};
pub use tabular::TabularEnv;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid environment configuration: {0}")]
    Config(String),
    #[error("step called on a finished episode; call reset first")]
    EpisodeDone,
    #[error("step called before reset")]
    NotReset,
    #[error("action has {got} dimensions, expected {expected}")]
    ActionDim { expected: usize, got: usize },
}

/// How a transition ends the episode, if at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Done {
    Continue,
    /// Time limit reached; the final state still has a future.
    Truncated,
    /// Absorbing state reached; no continuation value.
    Terminal,
}

impl Done {
    pub fn is_done(self) -> bool {
        self != Done::Continue
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub done: Done,
    /// Constraint-violation indicator of the next state, for metrics only.
    pub violation: bool,
}

pub trait Environment {
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, EnvError>;
    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError>;
}
