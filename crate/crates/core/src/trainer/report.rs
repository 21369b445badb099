use std::fmt::Write as _;

use super::rollout::Trajectory;
use crate::cvar::{cvar_gaussian, CvarError};
use crate::solver::StepType;

pub const CSV_COLUMNS: [&str; 10] = [
    "epoch",
    "env_steps",
    "mean_return",
    "mean_cv_rate",
    "cvar_cv_rate",
    "score",
    "constraint_slack",
    "kl",
    "step_type",
    "wall_time_s",
];

pub fn csv_header() -> String {
    CSV_COLUMNS.join(",")
}

/// `Σ R / (1 + Σ CV)` for one episode.
pub fn score(total_reward: f64, violations: usize) -> f64 {
    total_reward / (1.0 + violations as f64)
}

/// Episode-level safety and performance metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_cv_count: f64,
    pub mean_cv_rate: f64,
    /// Gaussian CVaR of the per-episode CV rates.
    pub cvar_cv_rate: f64,
    pub score: f64,
    pub returns: Vec<f64>,
    pub cv_rates: Vec<f64>,
}

/// Gaussian CVaR at level `alpha` from the sample mean and (population)
/// standard deviation.
pub fn cvar_of_samples(samples: &[f64], alpha: f64) -> Result<f64, CvarError> {
    if samples.is_empty() {
        return Err(CvarError::EmptyBatch);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    cvar_gaussian(mean, var.sqrt(), alpha)
}

impl EpisodeMetrics {
    pub fn from_trajectories(trajs: &[Trajectory], alpha: f64) -> Result<Self, CvarError> {
        if trajs.is_empty() {
            return Err(CvarError::EmptyBatch);
        }
        let n = trajs.len() as f64;
        let returns: Vec<f64> = trajs.iter().map(Trajectory::total_reward).collect();
        let cv_rates: Vec<f64> = trajs.iter().map(Trajectory::cv_rate).collect();
        let mean_cv_count = trajs.iter().map(|t| t.violation_count() as f64).sum::<f64>() / n;
        let score_mean = trajs
            .iter()
            .map(|t| score(t.total_reward(), t.violation_count()))
            .sum::<f64>()
            / n;
        Ok(Self {
            episodes: trajs.len(),
            mean_return: returns.iter().sum::<f64>() / n,
            mean_cv_count,
            mean_cv_rate: cv_rates.iter().sum::<f64>() / n,
            cvar_cv_rate: cvar_of_samples(&cv_rates, alpha)?,
            score: score_mean,
            returns,
            cv_rates,
        })
    }
}

/// Policy-update diagnostics of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDiagnostics {
    pub step_type: StepType,
    /// Constraint estimate at the old policy (CVaR or mean cost sum).
    pub constraint: f64,
    pub threshold: f64,
    /// Realized mean KL between the old and accepted policy.
    pub kl: f64,
    pub accepted_scale: f64,
    pub backtracks: usize,
    pub nu: f64,
    pub lambda: f64,
    pub j_c: f64,
    pub sigma_c: f64,
}

impl UpdateDiagnostics {
    /// Positive when the constraint is satisfied.
    pub fn slack(&self) -> f64 {
        self.threshold - self.constraint
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub env_steps: u64,
    pub metrics: EpisodeMetrics,
    pub update: UpdateDiagnostics,
    /// Final-sweep losses of the value, cost-value and cost-square heads.
    pub value_losses: [f64; 3],
    pub wall_time_s: f64,
}

impl EpochReport {
    pub fn csv_row(&self) -> String {
        let mut row = String::new();
        let m = &self.metrics;
        write!(
            row,
            "{},{},{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.env_steps,
            m.mean_return,
            m.mean_cv_rate,
            m.cvar_cv_rate,
            m.score,
            self.update.slack(),
            self.update.kl,
            self.update.step_type,
            self.wall_time_s,
        )
        .expect("writing to a string");
        row
    }
}
