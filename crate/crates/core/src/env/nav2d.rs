//! Point-mass goal navigation in a square arena with circular hazards.
//!
//! Observation layout: goal direction (2), goal distance (1), velocity (2),
//! then one lidar reading per angular sector: distance from the robot to the
//! nearest hazard surface whose centre lies in that sector, capped at
//! `lidar_max_range`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Done, EnvError, Environment, Step};
use crate::diffnet::tape::sigmoid;

const MAX_SPAWN_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub arena_half_width: f64,
    pub n_hazards: usize,
    pub hazard_radius: f64,
    pub goal_threshold: f64,
    pub cost_weight: f64,
    pub max_steps: usize,
    pub n_lidar: usize,
    pub dt: f64,
    pub max_speed: f64,
    pub lidar_max_range: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            arena_half_width: 2.0,
            n_hazards: 8,
            hazard_radius: 0.3,
            goal_threshold: 0.3,
            cost_weight: 10.0,
            max_steps: 1000,
            n_lidar: 16,
            dt: 0.1,
            max_speed: 1.0,
            lidar_max_range: 2.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let lengths = [
            ("arena_half_width", self.arena_half_width),
            ("hazard_radius", self.hazard_radius),
            ("goal_threshold", self.goal_threshold),
            ("dt", self.dt),
            ("max_speed", self.max_speed),
            ("lidar_max_range", self.lidar_max_range),
        ];
        for (name, v) in lengths {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EnvError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.cost_weight.is_finite() {
            return Err(EnvError::Config("cost_weight must be finite".into()));
        }
        if self.max_steps == 0 {
            return Err(EnvError::Config("max_steps must be at least 1".into()));
        }
        if self.n_lidar == 0 {
            return Err(EnvError::Config("n_lidar must be at least 1".into()));
        }
        Ok(())
    }

    /// Minimum distance between any two spawned entities.
    pub fn separation(&self) -> f64 {
        self.hazard_radius + self.goal_threshold
    }

    pub fn obs_dim(&self) -> usize {
        5 + self.n_lidar
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub robot_position: [f64; 2],
    pub robot_velocity: [f64; 2],
    pub hazard_centers: Vec<[f64; 2]>,
    pub goal_position: [f64; 2],
    pub step_count: usize,
}

#[derive(Debug, Clone)]
pub struct Nav2d {
    config: EnvConfig,
    state: Option<EnvState>,
    rng: ChaCha8Rng,
    done: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl Nav2d {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self {
            config,
            state: None,
            rng: ChaCha8Rng::seed_from_u64(0),
            done: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    /// Replaces the current layout; used to pose the robot in tests and tools.
    pub fn set_state(&mut self, state: EnvState) {
        self.done = state.step_count >= self.config.max_steps;
        self.state = Some(state);
    }

    fn sample_point(&mut self, taken: &[[f64; 2]], attempts: &mut usize) -> Result<[f64; 2], EnvError> {
        let hw = self.config.arena_half_width;
        let sep = self.config.separation();
        loop {
            *attempts += 1;
            if *attempts > MAX_SPAWN_ATTEMPTS {
                return Err(EnvError::Config(format!(
                    "could not place {} hazards, goal and robot with separation {sep} in an arena of half-width {hw} after {MAX_SPAWN_ATTEMPTS} attempts",
                    self.config.n_hazards
                )));
            }
            let p = [self.rng.gen_range(-hw..=hw), self.rng.gen_range(-hw..=hw)];
            if taken.iter().all(|&q| dist(p, q) >= sep) {
                return Ok(p);
            }
        }
    }

    /// Distance from `pos` to the nearest hazard centre, infinite with none.
    pub fn hazard_distance(&self, pos: [f64; 2]) -> f64 {
        self.state
            .as_ref()
            .map(|s| {
                s.hazard_centers
                    .iter()
                    .map(|&h| dist(pos, h))
                    .fold(f64::INFINITY, f64::min)
            })
            .unwrap_or(f64::INFINITY)
    }

    /// `sigmoid(w_c·(r_h − d_h))`; exactly zero with no hazards.
    pub fn cost_at(&self, pos: [f64; 2]) -> f64 {
        let d = self.hazard_distance(pos);
        if d.is_infinite() {
            return 0.0;
        }
        sigmoid(self.config.cost_weight * (self.config.hazard_radius - d))
    }

    /// Strictly inside a hazard.
    pub fn violation_at(&self, pos: [f64; 2]) -> bool {
        self.hazard_distance(pos) < self.config.hazard_radius
    }

    pub fn constraint_violation(&self) -> bool {
        self.state
            .as_ref()
            .is_some_and(|s| self.violation_at(s.robot_position))
    }

    fn observe(&self) -> Vec<f64> {
        let s = self.state.as_ref().expect("observe after reset");
        let cfg = &self.config;
        let mut obs = Vec::with_capacity(cfg.obs_dim());
        let dx = s.goal_position[0] - s.robot_position[0];
        let dy = s.goal_position[1] - s.robot_position[1];
        let d_g = dx.hypot(dy);
        if d_g > 0.0 {
            obs.extend([dx / d_g, dy / d_g]);
        } else {
            obs.extend([0.0, 0.0]);
        }
        obs.push(d_g);
        obs.extend(s.robot_velocity);
        let mut lidar = vec![cfg.lidar_max_range; cfg.n_lidar];
        let sector = 2.0 * PI / cfg.n_lidar as f64;
        for h in &s.hazard_centers {
            let hx = h[0] - s.robot_position[0];
            let hy = h[1] - s.robot_position[1];
            let angle = hy.atan2(hx).rem_euclid(2.0 * PI);
            let k = ((angle / sector) as usize).min(cfg.n_lidar - 1);
            let surface = (hx.hypot(hy) - cfg.hazard_radius).max(0.0);
            lidar[k] = lidar[k].min(surface);
        }
        obs.extend(lidar);
        obs
    }

    fn goal_distance(&self) -> f64 {
        let s = self.state.as_ref().expect("state after reset");
        dist(s.robot_position, s.goal_position)
    }
}

impl Environment for Nav2d {
    fn obs_dim(&self) -> usize {
        self.config.obs_dim()
    }

    fn act_dim(&self) -> usize {
        2
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let mut attempts = 0;
        let mut taken = Vec::with_capacity(self.config.n_hazards + 2);
        for _ in 0..self.config.n_hazards {
            let p = self.sample_point(&taken, &mut attempts)?;
            taken.push(p);
        }
        let goal = self.sample_point(&taken, &mut attempts)?;
        taken.push(goal);
        let robot = self.sample_point(&taken, &mut attempts)?;
        let hazard_centers = taken[..self.config.n_hazards].to_vec();
        self.state = Some(EnvState {
            robot_position: robot,
            robot_velocity: [0.0, 0.0],
            hazard_centers,
            goal_position: goal,
            step_count: 0,
        });
        self.done = false;
        Ok(self.observe())
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        if action.len() != 2 {
            return Err(EnvError::ActionDim {
                expected: 2,
                got: action.len(),
            });
        }
        if self.state.is_none() {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let cfg = self.config.clone();
        let d_before = self.goal_distance();
        let state = self.state.as_mut().expect("checked above");
        let hw = cfg.arena_half_width;
        let mut moved = [0.0; 2];
        for i in 0..2 {
            let a = if action[i].is_nan() { 0.0 } else { action[i].clamp(-1.0, 1.0) };
            let old = state.robot_position[i];
            let new = (old + a * cfg.max_speed * cfg.dt).clamp(-hw, hw);
            state.robot_position[i] = new;
            moved[i] = (new - old) / cfg.dt;
        }
        state.robot_velocity = moved;
        state.step_count += 1;
        let step_count = state.step_count;
        let robot = state.robot_position;

        let d_after = self.goal_distance();
        let reached = d_after <= cfg.goal_threshold;
        let reward = d_before - d_after + if reached { 1.0 } else { 0.0 };
        let cost = self.cost_at(robot);
        let violation = self.violation_at(robot);
        if reached {
            let mut taken = self.state.as_ref().expect("state").hazard_centers.clone();
            taken.push(robot);
            let mut attempts = 0;
            let goal = self.sample_point(&taken, &mut attempts)?;
            self.state.as_mut().expect("state").goal_position = goal;
        }
        let done = if step_count >= cfg.max_steps {
            self.done = true;
            Done::Truncated
        } else {
            Done::Continue
        };
        Ok(Step {
            obs: self.observe(),
            reward,
            cost,
            done,
            violation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env_with(cfg: EnvConfig) -> Nav2d {
        Nav2d::new(cfg).unwrap()
    }

    fn pose(env: &mut Nav2d, robot: [f64; 2], goal: [f64; 2], hazards: Vec<[f64; 2]>) {
        env.set_state(EnvState {
            robot_position: robot,
            robot_velocity: [0.0, 0.0],
            hazard_centers: hazards,
            goal_position: goal,
            step_count: 0,
        });
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = env_with(EnvConfig::default());
        let mut b = env_with(EnvConfig::default());
        assert_eq!(a.reset(7).unwrap(), b.reset(7).unwrap());
        assert_eq!(a.reset(7).unwrap(), b.reset(7).unwrap());
        assert_eq!(a.state(), b.state());
    }

    #[test]
    fn default_layout_honours_separation() {
        let mut env = env_with(EnvConfig::default());
        for seed in 0..50 {
            env.reset(seed).unwrap();
            let s = env.state().unwrap();
            assert_eq!(s.hazard_centers.len(), 8);
            let mut pts = s.hazard_centers.clone();
            pts.push(s.goal_position);
            pts.push(s.robot_position);
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    assert!(dist(pts[i], pts[j]) >= 0.6);
                }
            }
        }
    }

    #[test]
    fn observation_shape_and_ranges() {
        let mut env = env_with(EnvConfig::default());
        let obs = env.reset(3).unwrap();
        assert_eq!(obs.len(), 21);
        assert!((obs[0].hypot(obs[1]) - 1.0).abs() < 1e-12);
        assert!(obs[5..].iter().all(|&l| (0.0..=2.0).contains(&l)));
    }

    #[test]
    fn empty_arena_lidar_is_at_max_range() {
        let cfg = EnvConfig {
            n_hazards: 0,
            ..EnvConfig::default()
        };
        let mut env = env_with(cfg);
        let obs = env.reset(1).unwrap();
        assert!(obs[5..].iter().all(|&l| l == 2.0));
        assert!(!env.constraint_violation());
        assert_eq!(env.cost_at([0.0, 0.0]), 0.0);
    }

    #[test]
    fn lidar_reports_surface_distance_in_the_right_sector() {
        let mut env = env_with(EnvConfig::default());
        pose(&mut env, [0.0, 0.0], [1.5, 1.5], vec![[1.0, 0.1]]);
        let obs = env.observe();
        let expected = (1.0f64.hypot(0.1) - 0.3).max(0.0);
        assert!((obs[5] - expected).abs() < 1e-12);
        assert!(obs[6..].iter().all(|&l| l == 2.0));
    }

    #[test]
    fn cost_on_the_boundary_is_one_half() {
        let mut env = env_with(EnvConfig::default());
        pose(&mut env, [0.3, 0.0], [1.5, 1.5], vec![[0.0, 0.0]]);
        assert!((env.cost_at([0.3, 0.0]) - 0.5).abs() < 1e-15);
        assert!(!env.violation_at([0.3, 0.0]));
        assert!(env.violation_at([0.0, 0.0]));
    }

    #[test]
    fn cost_is_decreasing_in_distance() {
        let mut env = env_with(EnvConfig::default());
        pose(&mut env, [0.0, 0.0], [1.5, 1.5], vec![[0.0, 0.0]]);
        let mut prev = 1.0;
        for k in 0..40 {
            let c = env.cost_at([k as f64 * 0.05, 0.0]);
            assert!(c > 0.0 && c < 1.0 && c < prev);
            prev = c;
        }
    }

    #[test]
    fn zero_action_gives_zero_reward() {
        let mut env = env_with(EnvConfig::default());
        env.reset(11).unwrap();
        let step = env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(step.reward, 0.0);
    }

    #[test]
    fn reaching_the_goal_pays_a_bonus_and_respawns_it() {
        let mut env = env_with(EnvConfig::default());
        pose(&mut env, [0.0, 0.0], [0.35, 0.0], vec![[-1.5, -1.5]]);
        let step = env.step(&[1.0, 0.0]).unwrap();
        assert!((step.reward - (0.35 - 0.25 + 1.0)).abs() < 1e-12);
        let s = env.state().unwrap();
        assert_ne!(s.goal_position, [0.35, 0.0]);
        assert!(dist(s.goal_position, s.robot_position) >= 0.6);
        assert_eq!(step.done, Done::Continue);
    }

    #[test]
    fn rewards_telescope_without_goal_reach() {
        let mut env = env_with(EnvConfig::default());
        pose(&mut env, [-1.8, -1.8], [1.8, 1.8], vec![]);
        let d0 = env.goal_distance();
        let mut total = 0.0;
        for k in 0..10 {
            total += env.step(&[0.3 * (k as f64).cos(), 0.5]).unwrap().reward;
        }
        assert!((total - (d0 - env.goal_distance())).abs() < 1e-12);
    }

    #[test]
    fn actions_are_clamped_and_position_stays_in_the_arena() {
        let mut env = env_with(EnvConfig::default());
        pose(&mut env, [1.95, 0.0], [-1.0, 0.0], vec![]);
        let step = env.step(&[50.0, -50.0]).unwrap();
        let s = env.state().unwrap();
        assert_eq!(s.robot_position, [2.0, -0.1]);
        assert!((step.obs[4] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn episode_truncates_at_the_time_limit() {
        let cfg = EnvConfig {
            max_steps: 3,
            ..EnvConfig::default()
        };
        let mut env = env_with(cfg);
        env.reset(0).unwrap();
        assert_eq!(env.step(&[0.0, 0.0]).unwrap().done, Done::Continue);
        assert_eq!(env.step(&[0.0, 0.0]).unwrap().done, Done::Continue);
        assert_eq!(env.step(&[0.0, 0.0]).unwrap().done, Done::Truncated);
        assert_eq!(env.step(&[0.0, 0.0]), Err(EnvError::EpisodeDone));
    }

    #[test]
    fn overcrowded_arena_is_a_configuration_error() {
        let cfg = EnvConfig {
            arena_half_width: 0.5,
            n_hazards: 30,
            ..EnvConfig::default()
        };
        let mut env = env_with(cfg);
        assert!(matches!(env.reset(0), Err(EnvError::Config(_))));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = EnvConfig {
            hazard_radius: 0.0,
            ..EnvConfig::default()
        };
        assert!(Nav2d::new(cfg).is_err());
    }

    #[test]
    fn same_actions_give_identical_trajectories() {
        let run = || {
            let mut env = env_with(EnvConfig::default());
            let mut out = vec![env.reset(5).unwrap()];
            for k in 0..200 {
                let a = [(k as f64 * 0.3).sin(), (k as f64 * 0.7).cos()];
                let s = env.step(&a).unwrap();
                out.push(s.obs);
                out.push(vec![s.reward, s.cost]);
            }
            out
        };
        assert_eq!(run(), run());
    }
}
