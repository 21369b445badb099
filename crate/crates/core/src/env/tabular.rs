//! A tabular MDP exposed through the continuous-control interface.
//!
//! Observations are one-hot state encodings; the action is a vector with one
//! entry per discrete action and the largest entry is taken.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Done, EnvError, Environment, Step};
use crate::tabular::TabularMdp;

#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: TabularMdp,
    max_steps: usize,
    terminal: Option<usize>,
    state: Option<usize>,
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp, max_steps: usize, terminal: Option<usize>) -> Result<Self, EnvError> {
        if max_steps == 0 {
            return Err(EnvError::Config("max_steps must be at least 1".into()));
        }
        if terminal.is_some_and(|t| t >= mdp.n_states) {
            return Err(EnvError::Config("terminal state out of range".into()));
        }
        Ok(Self {
            mdp,
            max_steps,
            terminal,
            state: None,
            steps: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn state(&self) -> Option<usize> {
        self.state
    }

    fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.mdp.n_states];
        v[s] = 1.0;
        v
    }

    fn sample_index(&mut self, probs: impl Iterator<Item = f64>) -> usize {
        let u: f64 = self.rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in probs.enumerate() {
            acc += p;
            if p > 0.0 {
                last = i;
            }
            if u < acc {
                return i;
            }
        }
        last
    }
}

/// Index of the largest entry, first on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Environment for TabularEnv {
    fn obs_dim(&self) -> usize {
        self.mdp.n_states
    }

    fn act_dim(&self) -> usize {
        self.mdp.n_actions
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = self.mdp.rho.clone();
        let s = self.sample_index(rho.into_iter());
        self.state = Some(s);
        self.steps = 0;
        self.done = false;
        Ok(self.one_hot(s))
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        if action.len() != self.mdp.n_actions {
            return Err(EnvError::ActionDim {
                expected: self.mdp.n_actions,
                got: action.len(),
            });
        }
        let s = self.state.ok_or(EnvError::NotReset)?;
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let a = argmax(action);
        let n = self.mdp.n_states;
        let row: Vec<f64> = (0..n).map(|s2| self.mdp.p(s, a, s2)).collect();
        let s2 = self.sample_index(row.into_iter());
        self.steps += 1;
        self.state = Some(s2);
        let done = if Some(s2) == self.terminal {
            Done::Terminal
        } else if self.steps >= self.max_steps {
            Done::Truncated
        } else {
            Done::Continue
        };
        self.done = done.is_done();
        Ok(Step {
            obs: self.one_hot(s2),
            reward: self.mdp.reward(s, a, s2),
            cost: self.mdp.cost(s, a, s2),
            done,
            violation: false,
        })
    }
}
