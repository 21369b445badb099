//! Experiment configuration in a flat `section.key = value` text format.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so a
//! file only needs the keys it changes.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{EnvConfig, EnvError, Environment, Nav2d, TabularEnv};
use crate::tabular::ensemble::random_mdp_sized;
use crate::trainer::{LambdaPreset, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Nav2d,
    Tabular,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::Nav2d => "nav2d",
            EnvKind::Tabular => "tabular",
        }
    }
}

impl FromStr for EnvKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nav2d" => Ok(EnvKind::Nav2d),
            "tabular" => Ok(EnvKind::Tabular),
            other => Err(format!("expected `nav2d` or `tabular`, got `{other}`")),
        }
    }
}

/// A random tabular MDP drawn from a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TabularSpec {
    pub states: usize,
    pub actions: usize,
    pub seed: u64,
    /// Make the last state terminal.
    pub terminal: bool,
}

impl Default for TabularSpec {
    fn default() -> Self {
        Self {
            states: 5,
            actions: 3,
            seed: 0,
            terminal: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env_kind: EnvKind,
    /// Navigation settings; `max_steps` follows `train.horizon`.
    pub nav2d: EnvConfig,
    pub tabular: TabularSpec,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub log_level: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            env_kind: EnvKind::Nav2d,
            nav2d: EnvConfig {
                max_steps: train.horizon,
                ..EnvConfig::default()
            },
            tabular: TabularSpec::default(),
            train,
            output_dir: PathBuf::from("runs/default"),
            log_level: "info".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value.split(',').map(|part| parse(key, part.trim())).collect()
}

impl ExperimentConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected `section.key = value`, got `{line}`"),
            })?;
            config.set(key.trim(), value.trim()).map_err(|e| match e {
                ConfigError::UnknownKey(k) => ConfigError::Syntax {
                    line: i + 1,
                    message: format!("unknown key `{k}`"),
                },
                other => other,
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Sets one key. `train.lambda` also accepts the presets `td`, `gae`
    /// and `mc`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let e = &mut self.nav2d;
        match key {
            "env.kind" => self.env_kind = parse(key, value)?,
            "env.arena_half_width" => e.arena_half_width = parse(key, value)?,
            "env.n_hazards" => e.n_hazards = parse(key, value)?,
            "env.hazard_radius" => e.hazard_radius = parse(key, value)?,
            "env.goal_threshold" => e.goal_threshold = parse(key, value)?,
            "env.cost_weight" => e.cost_weight = parse(key, value)?,
            "env.n_lidar" => e.n_lidar = parse(key, value)?,
            "env.dt" => e.dt = parse(key, value)?,
            "env.max_speed" => e.max_speed = parse(key, value)?,
            "env.lidar_max_range" => e.lidar_max_range = parse(key, value)?,
            "env.tabular_states" => self.tabular.states = parse(key, value)?,
            "env.tabular_actions" => self.tabular.actions = parse(key, value)?,
            "env.tabular_seed" => self.tabular.seed = parse(key, value)?,
            "env.tabular_terminal" => self.tabular.terminal = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.episodes" => t.episodes = parse(key, value)?,
            "train.horizon" => t.horizon = parse(key, value)?,
            "train.gamma" => t.gamma = parse(key, value)?,
            "train.lambda" => {
                t.lambda = match value.parse::<LambdaPreset>() {
                    Ok(preset) => preset.lambda(),
                    Err(_) => parse(key, value)?,
                }
            }
            "train.value_lr" => t.value_lr = parse(key, value)?,
            "train.value_epochs" => t.value_epochs = parse(key, value)?,
            "train.minibatch" => t.minibatch = parse(key, value)?,
            "train.delta" => t.delta = parse(key, value)?,
            "train.constraint_mode" => t.constraint_mode = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.hidden" => t.hidden = parse_list(key, value)?,
            "train.init_log_std" => t.init_log_std = parse(key, value)?,
            "train.workers" => t.workers = parse(key, value)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "train.cost_weighting" => t.cost_weighting = parse(key, value)?,
            "train.square_weighting" => t.square_weighting = parse(key, value)?,
            "train.fvp_stride" => t.fvp_stride = parse(key, value)?,
            "train.damping" => t.solver.damping = parse(key, value)?,
            "train.cg_iters" => t.solver.cg_iters = parse(key, value)?,
            "train.cg_tol" => t.solver.cg_tol = parse(key, value)?,
            "train.backtrack_ratio" => t.line_search.backtrack_ratio = parse(key, value)?,
            "train.max_backtracks" => t.line_search.max_backtracks = parse(key, value)?,
            "train.kl_slack" => t.line_search.kl_slack = parse(key, value)?,
            "risk.alpha" => t.risk.alpha = parse(key, value)?,
            "risk.limit" => t.risk.limit = parse(key, value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            "output.log_level" => self.log_level = value.to_string(),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        self.sync();
        Ok(())
    }

    fn sync(&mut self) {
        self.train.risk.gamma = self.train.gamma;
        self.nav2d.max_steps = self.train.horizon;
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let e = &self.nav2d;
        let hidden: Vec<String> = t.hidden.iter().map(usize::to_string).collect();
        vec![
            ("env.kind", self.env_kind.as_str().to_string()),
            ("env.arena_half_width", e.arena_half_width.to_string()),
            ("env.n_hazards", e.n_hazards.to_string()),
            ("env.hazard_radius", e.hazard_radius.to_string()),
            ("env.goal_threshold", e.goal_threshold.to_string()),
            ("env.cost_weight", e.cost_weight.to_string()),
            ("env.n_lidar", e.n_lidar.to_string()),
            ("env.dt", e.dt.to_string()),
            ("env.max_speed", e.max_speed.to_string()),
            ("env.lidar_max_range", e.lidar_max_range.to_string()),
            ("env.tabular_states", self.tabular.states.to_string()),
            ("env.tabular_actions", self.tabular.actions.to_string()),
            ("env.tabular_seed", self.tabular.seed.to_string()),
            ("env.tabular_terminal", self.tabular.terminal.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.episodes", t.episodes.to_string()),
            ("train.horizon", t.horizon.to_string()),
            ("train.gamma", t.gamma.to_string()),
            ("train.lambda", t.lambda.to_string()),
            ("train.value_lr", t.value_lr.to_string()),
            ("train.value_epochs", t.value_epochs.to_string()),
            ("train.minibatch", t.minibatch.to_string()),
            ("train.delta", t.delta.to_string()),
            ("train.constraint_mode", t.constraint_mode.as_str().to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.hidden", hidden.join(",")),
            ("train.init_log_std", t.init_log_std.to_string()),
            ("train.workers", t.workers.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.cost_weighting", t.cost_weighting.as_str().to_string()),
            ("train.square_weighting", t.square_weighting.as_str().to_string()),
            ("train.fvp_stride", t.fvp_stride.to_string()),
            ("train.damping", t.solver.damping.to_string()),
            ("train.cg_iters", t.solver.cg_iters.to_string()),
            ("train.cg_tol", t.solver.cg_tol.to_string()),
            ("train.backtrack_ratio", t.line_search.backtrack_ratio.to_string()),
            ("train.max_backtracks", t.line_search.max_backtracks.to_string()),
            ("train.kl_slack", t.line_search.kl_slack.to_string()),
            ("risk.alpha", t.risk.alpha.to_string()),
            ("risk.limit", t.risk.limit.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
            ("output.log_level", self.log_level.clone()),
        ]
    }

    /// Serializes every key; [`ExperimentConfig::parse`] reads it back to an
    /// equal value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let this = key.split('.').next().unwrap_or("");
            if this != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = this;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(ConfigError::Invalid)?;
        match self.env_kind {
            EnvKind::Nav2d => self
                .nav2d
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            EnvKind::Tabular => {
                let t = &self.tabular;
                if t.states < 2 || t.actions < 1 {
                    return Err(ConfigError::Invalid(
                        "tabular env needs at least 2 states and 1 action".into(),
                    ));
                }
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(ConfigError::Invalid("output.dir must not be empty".into()));
        }
        Ok(())
    }

    /// Replaces the seed with `TRC_SEED` when that variable is set.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<(), ConfigError> {
        if let Some(v) = value {
            self.train.seed = parse("TRC_SEED", v.trim())?;
        }
        Ok(())
    }

    /// Builds one environment instance.
    pub fn build_env(&self) -> Result<Box<dyn Environment + Send>, EnvError> {
        match self.env_kind {
            EnvKind::Nav2d => Ok(Box::new(Nav2d::new(self.nav2d.clone())?)),
            EnvKind::Tabular => {
                let t = &self.tabular;
                let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
                let mdp = random_mdp_sized(&mut rng, t.states, t.actions, self.train.gamma);
                let terminal = t.terminal.then_some(t.states - 1);
                Ok(Box::new(TabularEnv::new(mdp, self.train.horizon, terminal)?))
            }
        }
    }

    /// One environment per configured worker.
    pub fn build_envs(&self) -> Result<Vec<Box<dyn Environment + Send>>, EnvError> {
        (0..self.train.workers.max(1)).map(|_| self.build_env()).collect()
    }
}
