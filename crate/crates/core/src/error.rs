use thiserror::Error;

use crate::advantage::AdvantageError;
use crate::config::ConfigError;
use crate::cvar::CvarError;
use crate::diffnet::checkpoint::CheckpointError;
use crate::diffnet::DiffError;
use crate::env::EnvError;
use crate::solver::SolverError;
use crate::tabular::ensemble::EnsembleError;
use crate::tabular::TabularError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-level error wrapping each subsystem's failure type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error(transparent)]
    Cvar(#[from] CvarError),
    #[error(transparent)]
    Tabular(#[from] TabularError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("training aborted at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
