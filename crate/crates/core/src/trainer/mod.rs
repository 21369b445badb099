//! The training loop: rollouts, advantage estimation, the trust-region policy
//! step and value-head regression.

pub mod normalizer;
pub mod report;
pub mod rollout;
pub mod values;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::advantage::{center, standardize, AdvantageBatch, AdvantageInputs, HeadValues};
use crate::cvar::{
    cvar_surrogate, estimate_cost_stats, expectation_surrogate, surrogate_moments, CostStats,
    EpisodeCosts, RiskSpec, SurrogateBatch,
};
use crate::diffnet::adam::{Adam, AdamState};
use crate::diffnet::checkpoint::{Architecture, Checkpoint, TrainerState};
use crate::diffnet::{grad_scalar, GaussianPolicy, ParamVector};
use crate::env::{Done, Environment};
use crate::solver::line_search::{line_search, Evaluation, LineSearchConfig};
use crate::solver::{solve, SolverConfig, SolverResult, SubproblemData};
use crate::{Error, Result};

pub use normalizer::Normalizer;
pub use report::{EpisodeMetrics, EpochReport, UpdateDiagnostics};
pub use rollout::{collect, collect_episode, derive_seed, Actor, Trajectory};
pub use values::{FitConfig, HeadLoss, HeadScale};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintMode {
    /// Constrain the Gaussian CVaR of the discounted cost sum.
    Cvar,
    /// Constrain its expectation only.
    Expectation,
}

impl ConstraintMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintMode::Cvar => "cvar",
            ConstraintMode::Expectation => "expectation",
        }
    }
}

impl std::str::FromStr for ConstraintMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cvar" => Ok(ConstraintMode::Cvar),
            "expectation" => Ok(ConstraintMode::Expectation),
            other => Err(format!("expected `cvar` or `expectation`, got `{other}`")),
        }
    }
}

/// How samples are weighted in the cost and cost-square surrogates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateWeighting {
    /// `γ^t` within each episode for the cost term, `γ^{2t}` for the square term.
    Discounted,
    Uniform,
}

impl StateWeighting {
    pub fn as_str(self) -> &'static str {
        match self {
            StateWeighting::Discounted => "discounted",
            StateWeighting::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for StateWeighting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "discounted" => Ok(StateWeighting::Discounted),
            "uniform" => Ok(StateWeighting::Uniform),
            other => Err(format!("expected `discounted` or `uniform`, got `{other}`")),
        }
    }
}

/// Named GAE settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaPreset {
    Td,
    Gae,
    Mc,
}

impl LambdaPreset {
    pub fn lambda(self) -> f64 {
        match self {
            LambdaPreset::Td => 0.0,
            LambdaPreset::Gae => 0.97,
            LambdaPreset::Mc => 1.0,
        }
    }
}

impl std::str::FromStr for LambdaPreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "td" => Ok(LambdaPreset::Td),
            "gae" => Ok(LambdaPreset::Gae),
            "mc" => Ok(LambdaPreset::Mc),
            other => Err(format!("expected `td`, `gae` or `mc`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub value_lr: f64,
    pub value_epochs: usize,
    pub minibatch: usize,
    /// `gamma` here always equals the field above.
    pub risk: RiskSpec,
    pub delta: f64,
    pub constraint_mode: ConstraintMode,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub workers: usize,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub cost_weighting: StateWeighting,
    pub square_weighting: StateWeighting,
    /// Use every `fvp_stride`-th sample in Fisher-vector products.
    pub fvp_stride: usize,
    pub solver: SolverConfig,
    pub line_search: LineSearchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            episodes: 10,
            horizon: 400,
            gamma: 0.99,
            lambda: 0.97,
            value_lr: 2e-4,
            value_epochs: 40,
            minibatch: 1024,
            risk: RiskSpec::default(),
            delta: 0.01,
            constraint_mode: ConstraintMode::Cvar,
            seed: 0,
            hidden: vec![32, 32],
            init_log_std: -0.5,
            workers: 1,
            checkpoint_every: 50,
            cost_weighting: StateWeighting::Discounted,
            square_weighting: StateWeighting::Discounted,
            fvp_stride: 1,
            solver: SolverConfig::default(),
            line_search: LineSearchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let counts = [
            ("epochs", self.epochs),
            ("episodes", self.episodes),
            ("horizon", self.horizon),
            ("value_epochs", self.value_epochs),
            ("minibatch", self.minibatch),
            ("workers", self.workers),
            ("fvp_stride", self.fvp_stride),
            ("cg_iters", self.solver.cg_iters),
            ("max_backtracks", self.line_search.max_backtracks),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err("hidden sizes must be non-empty and positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        let positive = [
            ("value_lr", self.value_lr),
            ("delta", self.delta),
            ("cg_tol", self.solver.cg_tol),
            ("kl_slack", self.line_search.kl_slack),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.solver.damping.is_nan() || self.solver.damping < 0.0 {
            return Err("damping must be non-negative".into());
        }
        if !(self.line_search.backtrack_ratio > 0.0 && self.line_search.backtrack_ratio < 1.0) {
            return Err("backtrack_ratio must lie in (0, 1)".into());
        }
        if !self.init_log_std.is_finite() {
            return Err("init_log_std must be finite".into());
        }
        if self.risk.gamma != self.gamma {
            return Err("risk gamma must equal the training gamma".into());
        }
        self.risk.validate().map_err(|e| e.to_string())
    }

    fn fit_config(&self) -> FitConfig {
        FitConfig {
            sweeps: self.value_epochs,
            minibatch: self.minibatch,
        }
    }

    pub fn policy_settings(&self) -> PolicySettings {
        PolicySettings {
            mode: self.constraint_mode,
            risk: self.risk,
            delta: self.delta,
            fvp_stride: self.fvp_stride,
            solver: self.solver,
            line_search: self.line_search,
        }
    }
}

/// Everything the policy step needs besides the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySettings {
    pub mode: ConstraintMode,
    pub risk: RiskSpec,
    pub delta: f64,
    pub fvp_stride: usize,
    pub solver: SolverConfig,
    pub line_search: LineSearchConfig,
}

/// Samples and advantages for one policy step.
#[derive(Debug, Clone, Copy)]
pub struct PolicyBatch<'a> {
    pub states: ArrayView2<'a, f64>,
    pub actions: ArrayView2<'a, f64>,
    /// Reward advantages, already standardized.
    pub advantages: &'a [f64],
    pub adv_cost: &'a [f64],
    pub adv_square: &'a [f64],
    pub cost_weights: &'a [f64],
    pub square_weights: &'a [f64],
    pub cost_stats: CostStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyUpdate {
    pub params: Vec<f64>,
    pub solver: SolverResult,
    pub diagnostics: UpdateDiagnostics,
}

fn column(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape")
}

/// `mean(ratio·Â)` and its gradient.
pub fn objective_gradient(
    policy: &GaussianPolicy,
    params: &[f64],
    states: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
    old_log_probs: &[f64],
    advantages: &[f64],
) -> Result<(f64, ParamVector)> {
    let states = states.to_owned();
    let actions = actions.to_owned();
    Ok(grad_scalar(params, |tape, p| {
        let lp = policy.log_prob_var(p, tape.constant(states), tape.constant(actions));
        let ratio = (lp - tape.constant(column(old_log_probs))).exp();
        (ratio * tape.constant(column(advantages))).mean()
    })?)
}

fn objective_value(
    policy: &GaussianPolicy,
    params: &[f64],
    batch: &PolicyBatch<'_>,
    old_log_probs: &[f64],
) -> Result<f64> {
    let lp = policy.log_prob_batch(params, batch.states, batch.actions)?;
    let n = lp.len().max(1) as f64;
    Ok(lp
        .iter()
        .zip(old_log_probs)
        .zip(batch.advantages)
        .map(|((l, o), a)| (l - o).exp() * a)
        .sum::<f64>()
        / n)
}

fn surrogate_batch<'a>(batch: &'a PolicyBatch<'_>, old_log_probs: &'a [f64]) -> SurrogateBatch<'a> {
    SurrogateBatch {
        states: batch.states.reborrow(),
        actions: batch.actions.reborrow(),
        old_log_probs,
        adv_cost: batch.adv_cost,
        adv_square: batch.adv_square,
        cost_weights: batch.cost_weights,
        square_weights: batch.square_weights,
    }
}

/// Constraint surrogate and its gradient for the configured mode.
pub fn constraint_gradient(
    policy: &GaussianPolicy,
    params: &[f64],
    batch: &SurrogateBatch<'_>,
    stats: &CostStats,
    mode: ConstraintMode,
    risk: &RiskSpec,
) -> Result<(f64, ParamVector)> {
    Ok(match mode {
        ConstraintMode::Cvar => cvar_surrogate(policy, params, batch, stats, risk)?,
        ConstraintMode::Expectation => expectation_surrogate(policy, params, batch, stats, risk.gamma)?,
    })
}

fn constraint_value(
    policy: &GaussianPolicy,
    params: &[f64],
    batch: &SurrogateBatch<'_>,
    stats: &CostStats,
    mode: ConstraintMode,
    risk: &RiskSpec,
) -> Result<f64> {
    let m = surrogate_moments(policy, params, batch, stats, risk.gamma)?;
    Ok(match mode {
        ConstraintMode::Cvar => m.cvar(risk.alpha)?,
        ConstraintMode::Expectation => m.j_c,
    })
}

/// One trust-region policy step from `params`.
pub fn update_policy(
    policy: &GaussianPolicy,
    params: &[f64],
    batch: &PolicyBatch<'_>,
    settings: &PolicySettings,
) -> Result<PolicyUpdate> {
    let old_log_probs = policy.log_prob_batch(params, batch.states, batch.actions)?;
    let (objective, g) = objective_gradient(
        policy,
        params,
        batch.states,
        batch.actions,
        &old_log_probs,
        batch.advantages,
    )?;
    let sur = surrogate_batch(batch, &old_log_probs);
    let stats = batch.cost_stats;
    let (constraint, b) = constraint_gradient(policy, params, &sur, &stats, settings.mode, &settings.risk)?;
    let threshold = settings.risk.threshold();

    let fvp_states = if settings.fvp_stride > 1 {
        batch.states.slice(ndarray::s![..;settings.fvp_stride, ..]).to_owned()
    } else {
        batch.states.to_owned()
    };
    let damping = settings.solver.damping;
    let fvp = |v: &ParamVector| policy.fisher_vector_product(params, fvp_states.view(), v, damping);
    let sub = SubproblemData {
        g,
        b,
        c: constraint - threshold,
        delta: settings.delta,
        fvp: &fvp,
    };
    let mut result = solve(&sub, &settings.solver)?;

    let before = Evaluation {
        kl: 0.0,
        objective,
        constraint,
    };
    let outcome = line_search(
        params,
        &result.direction,
        result.step_type,
        settings.delta,
        threshold,
        before,
        &settings.line_search,
        |candidate| -> Result<Evaluation> {
            Ok(Evaluation {
                kl: policy.kl(params, candidate, batch.states)?,
                objective: objective_value(policy, candidate, batch, &old_log_probs)?,
                constraint: constraint_value(policy, candidate, &sur, &stats, settings.mode, &settings.risk)?,
            })
        },
    )?;
    result.accepted_scale = outcome.scale;
    let diagnostics = UpdateDiagnostics {
        step_type: result.step_type,
        constraint,
        threshold,
        kl: outcome.evaluation.kl,
        accepted_scale: outcome.scale,
        backtracks: outcome.backtracks,
        nu: result.nu,
        lambda: result.lambda,
        j_c: stats.j_c,
        sigma_c: stats.sigma_c,
    };
    Ok(PolicyUpdate {
        params: outcome.params,
        solver: result,
        diagnostics,
    })
}

/// Flattened epoch data with normalized observations.
struct EpochBatch {
    states: Array2<f64>,
    actions: Array2<f64>,
    finals: Array2<f64>,
    rewards: Vec<f64>,
    costs: Vec<f64>,
    dones: Vec<Done>,
    /// `(start, len)` of each episode.
    episodes: Vec<(usize, usize)>,
}

impl EpochBatch {
    fn new(trajs: &[Trajectory], normalizer: &Normalizer, obs_dim: usize, act_dim: usize) -> Self {
        let n: usize = trajs.iter().map(Trajectory::len).sum();
        let mut states = Array2::zeros((n, obs_dim));
        let mut actions = Array2::zeros((n, act_dim));
        let mut finals = Array2::zeros((trajs.len(), obs_dim));
        let mut rewards = Vec::with_capacity(n);
        let mut costs = Vec::with_capacity(n);
        let mut dones = Vec::with_capacity(n);
        let mut episodes = Vec::with_capacity(trajs.len());
        let mut row = 0;
        for (e, t) in trajs.iter().enumerate() {
            episodes.push((row, t.len()));
            for k in 0..t.len() {
                let mut s = states.row_mut(row + k);
                normalizer.normalize_into(&t.observations[k], s.as_slice_mut().expect("row"));
                for (a, v) in actions.row_mut(row + k).iter_mut().zip(&t.actions[k]) {
                    *a = *v;
                }
            }
            let mut f = finals.row_mut(e);
            normalizer.normalize_into(&t.observations[t.len()], f.as_slice_mut().expect("row"));
            rewards.extend_from_slice(&t.rewards);
            costs.extend_from_slice(&t.costs);
            dones.extend_from_slice(&t.dones);
            row += t.len();
        }
        Self {
            states,
            actions,
            finals,
            rewards,
            costs,
            dones,
            episodes,
        }
    }

    /// Head values at `s_t` and at `s_{t+1}`, the latter zero after a
    /// terminal step.
    fn head_values(&self, current: &[f64], finals: &[f64]) -> Vec<f64> {
        let mut next = vec![0.0; current.len()];
        for (e, &(start, len)) in self.episodes.iter().enumerate() {
            for k in 0..len {
                let t = start + k;
                next[t] = if k + 1 < len {
                    current[t + 1]
                } else if self.dones[t] == Done::Terminal {
                    0.0
                } else {
                    finals[e]
                };
            }
        }
        next
    }

    /// Per-sample weights summing to one; `discount` is applied per step.
    fn state_weights(&self, weighting: StateWeighting, discount: f64) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.rewards.len());
        for &(_, len) in &self.episodes {
            let mut g = 1.0;
            for _ in 0..len {
                w.push(match weighting {
                    StateWeighting::Discounted => g,
                    StateWeighting::Uniform => 1.0,
                });
                g *= discount;
            }
        }
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|x| *x /= total);
        }
        w
    }
}

/// An epoch batch with everything the policy step and head fits consume.
struct Prepared {
    batch: EpochBatch,
    advantages: Vec<f64>,
    adv_cost: Vec<f64>,
    adv_square: Vec<f64>,
    cost_weights: Vec<f64>,
    square_weights: Vec<f64>,
    cost_stats: CostStats,
    /// Value, cost-value and cost-square targets.
    targets: [Vec<f64>; 3],
}

impl Prepared {
    fn policy_batch(&self) -> PolicyBatch<'_> {
        PolicyBatch {
            states: self.batch.states.view(),
            actions: self.batch.actions.view(),
            advantages: &self.advantages,
            adv_cost: &self.adv_cost,
            adv_square: &self.adv_square,
            cost_weights: &self.cost_weights,
            square_weights: &self.square_weights,
            cost_stats: self.cost_stats,
        }
    }
}

const TAG_INIT: u64 = 0x1717;
const TAG_ROLLOUT: u64 = 0x2828;
const TAG_VALUES: u64 = 0x3939;

/// Trainer state between epochs.
pub struct Trainer {
    config: TrainConfig,
    arch: Architecture,
    policy_params: Vec<f64>,
    heads: [Vec<f64>; 3],
    head_scales: [HeadScale; 3],
    adam_states: [AdamState; 3],
    normalizer: Normalizer,
    envs: Vec<Box<dyn Environment + Send>>,
    next_epoch: usize,
    env_steps: u64,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("next_epoch", &self.next_epoch)
            .field("env_steps", &self.env_steps)
            .field("workers", &self.envs.len())
            .finish_non_exhaustive()
    }
}

fn check_envs(envs: &[Box<dyn Environment + Send>]) -> Result<(usize, usize)> {
    let first = envs.first().ok_or_else(|| Error::Training {
        epoch: 0,
        reason: "no environments supplied".into(),
    })?;
    let dims = (first.obs_dim(), first.act_dim());
    if envs.iter().any(|e| (e.obs_dim(), e.act_dim()) != dims) {
        return Err(Error::Training {
            epoch: 0,
            reason: "environments disagree on dimensions".into(),
        });
    }
    Ok(dims)
}

impl Trainer {
    /// Fresh networks seeded from `config.seed`. One environment per worker.
    pub fn new(config: TrainConfig, envs: Vec<Box<dyn Environment + Send>>) -> Result<Self> {
        config.validate().map_err(|reason| Error::Training { epoch: 0, reason })?;
        let (obs_dim, act_dim) = check_envs(&envs)?;
        let arch = Architecture::new(obs_dim, act_dim, &config.hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_INIT));
        let policy_params = arch.policy.init_params(&mut rng, config.init_log_std).into_inner();
        let heads = [
            arch.value.init_params(&mut rng, 1.0),
            arch.cost_value.init_params(&mut rng, 1.0),
            arch.cost_square.init_params(&mut rng, 1.0),
        ];
        let adam = Adam::new(config.value_lr);
        let adam_states = [
            adam.init(heads[0].len()),
            adam.init(heads[1].len()),
            adam.init(heads[2].len()),
        ];
        Ok(Self {
            config,
            arch,
            policy_params,
            heads,
            head_scales: [HeadScale::IDENTITY; 3],
            adam_states,
            normalizer: Normalizer::new(obs_dim),
            envs,
            next_epoch: 0,
            env_steps: 0,
        })
    }

    /// Restores networks, normalizer and optimizer state from a checkpoint.
    pub fn from_checkpoint(
        config: TrainConfig,
        envs: Vec<Box<dyn Environment + Send>>,
        checkpoint: &Checkpoint,
    ) -> Result<Self> {
        let mut trainer = Self::new(config, envs)?;
        let arch = checkpoint.architecture()?;
        let dims = (checkpoint.obs_dim, checkpoint.act_dim, checkpoint.hidden.as_slice());
        let ours = (
            trainer.arch.policy.obs_dim(),
            trainer.arch.policy.act_dim(),
            trainer.config.hidden.as_slice(),
        );
        if dims != ours {
            return Err(Error::Training {
                epoch: 0,
                reason: format!(
                    "checkpoint architecture {dims:?} does not match configuration {ours:?}"
                ),
            });
        }
        trainer.arch = arch;
        trainer.policy_params = checkpoint.policy.clone();
        trainer.heads = [
            checkpoint.value.clone(),
            checkpoint.cost_value.clone(),
            checkpoint.cost_square.clone(),
        ];
        if let Some(norm) = &checkpoint.normalizer {
            trainer.normalizer = Normalizer::from_state(norm);
        }
        if let Some(state) = &checkpoint.trainer {
            trainer.adam_states = state.adam.clone();
            trainer.head_scales = state
                .head_scales
                .map(|(shift, scale)| HeadScale { shift, scale });
            trainer.next_epoch = state.next_epoch as usize;
            trainer.env_steps = state.env_steps;
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn policy(&self) -> &GaussianPolicy {
        &self.arch.policy
    }

    pub fn policy_params(&self) -> &[f64] {
        &self.policy_params
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            obs_dim: self.arch.policy.obs_dim(),
            act_dim: self.arch.policy.act_dim(),
            hidden: self.config.hidden.clone(),
            policy: self.policy_params.clone(),
            value: self.heads[0].clone(),
            cost_value: self.heads[1].clone(),
            cost_square: self.heads[2].clone(),
            normalizer: Some(self.normalizer.state()),
            trainer: Some(TrainerState {
                next_epoch: self.next_epoch as u32,
                env_steps: self.env_steps,
                adam: self.adam_states.clone(),
                head_scales: self.head_scales.map(|s| (s.shift, s.scale)),
            }),
        }
    }

    /// Collects this epoch's episodes with the current policy.
    pub fn collect(&mut self) -> Result<Vec<Trajectory>> {
        let actor = Actor {
            policy: &self.arch.policy,
            params: &self.policy_params,
            normalizer: &self.normalizer,
            deterministic: false,
        };
        let seed = derive_seed(derive_seed(self.config.seed, TAG_ROLLOUT), self.next_epoch as u64);
        rollout::collect_parallel(
            &mut self.envs,
            &actor,
            self.config.episodes,
            self.config.horizon,
            seed,
        )
    }

    fn abort(&self, err: Error) -> Error {
        match err {
            Error::Training { .. } => err,
            other => Error::Training {
                epoch: self.next_epoch,
                reason: other.to_string(),
            },
        }
    }

    /// Collect, estimate advantages, take the policy step, then fit the heads
    /// against targets computed before the step.
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let start = Instant::now();
        let trajs = self.collect()?;
        let result = self.update(&trajs);
        let (update, value_losses) = result.map_err(|e| self.abort(e))?;
        self.normalizer
            .update(trajs.iter().flat_map(|t| t.observations.iter().map(Vec::as_slice)));
        let steps: usize = trajs.iter().map(Trajectory::len).sum();
        self.env_steps += steps as u64;
        let report = EpochReport {
            epoch: self.next_epoch,
            env_steps: self.env_steps,
            metrics: EpisodeMetrics::from_trajectories(&trajs, self.config.risk.alpha)?,
            update,
            value_losses,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        self.next_epoch += 1;
        Ok(report)
    }

    /// Advantages, weights and cost statistics for `trajs` under the current heads.
    fn prepare(&self, trajs: &[Trajectory]) -> Result<Prepared> {
        let cfg = &self.config;
        let policy = &self.arch.policy;
        let batch = EpochBatch::new(trajs, &self.normalizer, policy.obs_dim(), policy.act_dim());
        let specs = [&self.arch.value, &self.arch.cost_value, &self.arch.cost_square];
        let mut current: Vec<Vec<f64>> = Vec::with_capacity(3);
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(3);
        let mut finals: Vec<Vec<f64>> = Vec::with_capacity(3);
        for ((spec, params), &scale) in specs.iter().zip(&self.heads).zip(&self.head_scales) {
            let cur = values::predict(spec, params, scale, batch.states.view())?;
            let fin = values::predict(spec, params, scale, batch.finals.view())?;
            next.push(batch.head_values(&cur, &fin));
            current.push(cur);
            finals.push(fin);
        }
        let inputs = AdvantageInputs {
            rewards: &batch.rewards,
            costs: &batch.costs,
            dones: &batch.dones,
            value: HeadValues {
                current: &current[0],
                next: &next[0],
            },
            cost_value: HeadValues {
                current: &current[1],
                next: &next[1],
            },
            cost_square: HeadValues {
                current: &current[2],
                next: &next[2],
            },
        };
        let adv = AdvantageBatch::compute(&inputs, cfg.gamma, cfg.lambda)?;

        let episode_costs: Vec<EpisodeCosts<'_>> = batch
            .episodes
            .iter()
            .enumerate()
            .map(|(e, &(start, len))| EpisodeCosts {
                costs: &batch.costs[start..start + len],
                bootstrap: (batch.dones[start + len - 1] == Done::Truncated)
                    .then(|| (finals[1][e], finals[2][e])),
            })
            .collect();
        let cost_stats = estimate_cost_stats(&episode_costs, cfg.gamma)?;

        let mut advantages = adv.adv_reward;
        standardize(&mut advantages);
        let cost_weights = batch.state_weights(cfg.cost_weighting, cfg.gamma);
        let square_weights = batch.state_weights(cfg.square_weighting, cfg.gamma * cfg.gamma);
        let mut adv_cost = adv.adv_cost;
        let mut adv_square = adv.adv_square;
        center(&mut adv_cost, Some(&cost_weights));
        center(&mut adv_square, Some(&square_weights));
        Ok(Prepared {
            batch,
            advantages,
            adv_cost,
            adv_square,
            cost_weights,
            square_weights,
            cost_stats,
            targets: [adv.target_value, adv.target_cost_value, adv.target_square],
        })
    }

    fn update(&mut self, trajs: &[Trajectory]) -> Result<(UpdateDiagnostics, [f64; 3])> {
        let prepared = self.prepare(trajs)?;
        let cfg = &self.config;
        let policy = &self.arch.policy;
        let specs = [&self.arch.value, &self.arch.cost_value, &self.arch.cost_square];
        let policy_batch = prepared.policy_batch();
        let step = update_policy(policy, &self.policy_params, &policy_batch, &cfg.policy_settings())?;
        log::debug!(
            "epoch {}: {} step, scale {}, kl {:.3e}, constraint {:.4} / {:.4}, j_c {:.4}, sigma_c {:.4}, nu {:.3e}, lambda {:.3e}",
            self.next_epoch,
            step.diagnostics.step_type,
            step.diagnostics.accepted_scale,
            step.diagnostics.kl,
            step.diagnostics.constraint,
            step.diagnostics.threshold,
            step.diagnostics.j_c,
            step.diagnostics.sigma_c,
            step.diagnostics.nu,
            step.diagnostics.lambda,
        );
        self.policy_params = step.params;

        let adam = Adam::new(cfg.value_lr);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            derive_seed(cfg.seed, TAG_VALUES),
            self.next_epoch as u64,
        ));
        let losses = [HeadLoss::Squared, HeadLoss::Squared, HeadLoss::SquareRoot];
        let mut final_losses = [0.0; 3];
        for h in 0..3 {
            let scale = HeadScale::from_targets(&prepared.targets[h], specs[h].output_activation);
            self.head_scales[h].carry_over(specs[h], &mut self.heads[h], scale);
            self.head_scales[h] = scale;
            let history = values::fit_head(
                specs[h],
                &mut self.heads[h],
                scale,
                &adam,
                &mut self.adam_states[h],
                prepared.batch.states.view(),
                &prepared.targets[h],
                losses[h],
                cfg.fit_config(),
                &mut rng,
            )?;
            final_losses[h] = history.last().copied().unwrap_or(0.0);
        }
        Ok((step.diagnostics, final_losses))
    }
}

/// Where [`train`] writes its artifacts.
#[derive(Debug, Clone, Copy)]
pub struct OutputPaths<'a> {
    pub dir: &'a Path,
}

impl OutputPaths<'_> {
    pub const CSV: &'static str = "progress.csv";
    pub const FINAL: &'static str = "final.trc";

    pub fn checkpoint_name(epoch: usize) -> String {
        format!("epoch_{epoch:05}.trc")
    }
}

/// Runs the remaining epochs. With an output directory, appends one CSV row
/// per epoch and writes periodic plus final checkpoints.
pub fn train(trainer: &mut Trainer, output: Option<OutputPaths<'_>>) -> Result<Vec<EpochReport>> {
    let mut csv = match output {
        Some(out) => {
            std::fs::create_dir_all(out.dir)?;
            let path = out.dir.join(OutputPaths::CSV);
            let resume = trainer.next_epoch > 0 && path.exists();
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(resume)
                .write(true)
                .truncate(!resume)
                .open(path)?;
            let mut w = BufWriter::new(file);
            if !resume {
                writeln!(w, "{}", report::csv_header())?;
            }
            Some(w)
        }
        None => None,
    };
    let mut reports = Vec::new();
    while trainer.next_epoch < trainer.config.epochs {
        let report = trainer.run_epoch()?;
        log::info!(
            "epoch {:>4}  return {:>7.3}  cv {:.4}  cvar {:.4}  score {:>7.3}  {}",
            report.epoch,
            report.metrics.mean_return,
            report.metrics.mean_cv_rate,
            report.metrics.cvar_cv_rate,
            report.metrics.score,
            report.update.step_type,
        );
        if let (Some(w), Some(out)) = (csv.as_mut(), output) {
            writeln!(w, "{}", report.csv_row())?;
            w.flush()?;
            let every = trainer.config.checkpoint_every;
            if every > 0 && trainer.next_epoch.is_multiple_of(every) {
                let name = OutputPaths::checkpoint_name(trainer.next_epoch);
                trainer.checkpoint().save(&out.dir.join(name))?;
            }
        }
        reports.push(report);
    }
    if let Some(out) = output {
        trainer.checkpoint().save(&out.dir.join(OutputPaths::FINAL))?;
    }
    Ok(reports)
}

/// Runs the mean-action policy of a checkpoint for `episodes` episodes.
pub fn evaluate(
    checkpoint: &Checkpoint,
    env: &mut dyn Environment,
    episodes: usize,
    horizon: usize,
    seed: u64,
    alpha: f64,
) -> Result<(EpisodeMetrics, Vec<Trajectory>)> {
    let arch = checkpoint.architecture()?;
    if (env.obs_dim(), env.act_dim()) != (checkpoint.obs_dim, checkpoint.act_dim) {
        return Err(Error::Training {
            epoch: 0,
            reason: format!(
                "checkpoint expects obs/act dims {}/{}, environment has {}/{}",
                checkpoint.obs_dim,
                checkpoint.act_dim,
                env.obs_dim(),
                env.act_dim()
            ),
        });
    }
    let normalizer = checkpoint
        .normalizer
        .as_ref()
        .map(Normalizer::from_state)
        .unwrap_or_else(|| Normalizer::new(checkpoint.obs_dim));
    let actor = Actor {
        policy: &arch.policy,
        params: &checkpoint.policy,
        normalizer: &normalizer,
        deterministic: true,
    };
    let trajs = collect(env, &actor, episodes, horizon, seed)?;
    Ok((EpisodeMetrics::from_trajectories(&trajs, alpha)?, trajs))
}

/// Writes `reports` as a complete CSV file.
pub fn write_csv(path: &Path, reports: &[EpochReport]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", report::csv_header())?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}
