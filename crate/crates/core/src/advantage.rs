//! GAE and TD(λ) targets for the reward value, cost value and cost-square heads.
//!
//! All inputs are flat per-timestep arrays over a batch of concatenated
//! episodes. `next_*` arrays hold the head's estimate at `s_{t+1}`; at a
//! truncated step that is the bootstrap at the final state, at a terminal step
//! it is ignored.

use thiserror::Error;

use crate::env::Done;

#[derive(Debug, Error, PartialEq)]
pub enum AdvantageError {
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("batch does not end on an episode boundary")]
    OpenEpisode,
    #[error("{what} = {value} is outside [0, 1]")]
    Parameter { what: &'static str, value: f64 },
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), AdvantageError> {
    if expected != got {
        return Err(AdvantageError::LengthMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

fn check_params(gamma: f64, lambda: f64) -> Result<(), AdvantageError> {
    for (what, value) in [("gamma", gamma), ("lambda", lambda)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(AdvantageError::Parameter { what, value });
        }
    }
    Ok(())
}

/// Backward GAE recursion over TD errors with discount `base`, reset at
/// episode boundaries.
fn accumulate(deltas: &[f64], dones: &[Done], base: f64) -> Result<Vec<f64>, AdvantageError> {
    if dones.last().is_some_and(|d| !d.is_done()) {
        return Err(AdvantageError::OpenEpisode);
    }
    let mut out = vec![0.0; deltas.len()];
    let mut running = 0.0;
    for t in (0..deltas.len()).rev() {
        if dones[t].is_done() {
            running = 0.0;
        }
        running = deltas[t] + base * running;
        out[t] = running;
    }
    Ok(out)
}

fn continuation(done: Done) -> f64 {
    if done == Done::Terminal {
        0.0
    } else {
        1.0
    }
}

/// Standard GAE: `δ_t = r_t + γV(s_{t+1}) − V(s_t)`, accumulated with `γλ`.
pub fn gae_standard(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[Done],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>, AdvantageError> {
    check_params(gamma, lambda)?;
    let n = rewards.len();
    check_len("values", n, values.len())?;
    check_len("next_values", n, next_values.len())?;
    check_len("dones", n, dones.len())?;
    let deltas: Vec<f64> = (0..n)
        .map(|t| rewards[t] + gamma * continuation(dones[t]) * next_values[t] - values[t])
        .collect();
    accumulate(&deltas, dones, gamma * lambda)
}

/// Cost-square GAE with `δ_t = c² + 2γ·c·V_C(s_{t+1}) + γ²·S_C(s_{t+1}) − S_C(s_t)`,
/// accumulated with base `γ²λ`.
#[allow(clippy::too_many_arguments)]
pub fn gae_square(
    costs: &[f64],
    cost_values_next: &[f64],
    square_values: &[f64],
    square_values_next: &[f64],
    dones: &[Done],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>, AdvantageError> {
    check_params(gamma, lambda)?;
    let n = costs.len();
    check_len("cost_values_next", n, cost_values_next.len())?;
    check_len("square_values", n, square_values.len())?;
    check_len("square_values_next", n, square_values_next.len())?;
    check_len("dones", n, dones.len())?;
    let deltas: Vec<f64> = (0..n)
        .map(|t| {
            let k = continuation(dones[t]);
            let c = costs[t];
            c * c + k * (2.0 * gamma * c * cost_values_next[t]
                + gamma * gamma * square_values_next[t])
                - square_values[t]
        })
        .collect();
    accumulate(&deltas, dones, gamma * gamma * lambda)
}

/// `value + advantage` per timestep.
pub fn td_lambda_targets(values: &[f64], advantages: &[f64]) -> Vec<f64> {
    values.iter().zip(advantages).map(|(v, a)| v + a).collect()
}

/// TD(λ) targets for the square head, floored at zero.
pub fn square_targets(values: &[f64], advantages: &[f64]) -> Vec<f64> {
    values
        .iter()
        .zip(advantages)
        .map(|(v, a)| (v + a).max(0.0))
        .collect()
}

/// Shifts and scales `xs` in place to zero mean and unit variance.
pub fn standardize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for x in xs.iter_mut() {
        *x = (*x - mean) / std;
    }
}

/// Subtracts the weighted mean without rescaling. `weights` must sum to 1;
/// `None` means uniform weights.
pub fn center(xs: &mut [f64], weights: Option<&[f64]>) {
    if xs.is_empty() {
        return;
    }
    let mean = match weights {
        Some(w) => xs.iter().zip(w).map(|(x, w)| x * w).sum::<f64>(),
        None => xs.iter().sum::<f64>() / xs.len() as f64,
    };
    xs.iter_mut().for_each(|x| *x -= mean);
}

/// Head estimates at `s_t` and `s_{t+1}` for every timestep.
#[derive(Debug, Clone, Copy)]
pub struct HeadValues<'a> {
    pub current: &'a [f64],
    pub next: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub struct AdvantageInputs<'a> {
    pub rewards: &'a [f64],
    pub costs: &'a [f64],
    pub dones: &'a [Done],
    pub value: HeadValues<'a>,
    pub cost_value: HeadValues<'a>,
    pub cost_square: HeadValues<'a>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    pub adv_reward: Vec<f64>,
    pub adv_cost: Vec<f64>,
    pub adv_square: Vec<f64>,
    pub target_value: Vec<f64>,
    pub target_cost_value: Vec<f64>,
    pub target_square: Vec<f64>,
    /// Index of the first timestep of each episode.
    pub episode_starts: Vec<usize>,
}

impl AdvantageBatch {
    pub fn compute(
        inputs: &AdvantageInputs<'_>,
        gamma: f64,
        lambda: f64,
    ) -> Result<Self, AdvantageError> {
        let adv_reward = gae_standard(
            inputs.rewards,
            inputs.value.current,
            inputs.value.next,
            inputs.dones,
            gamma,
            lambda,
        )?;
        let adv_cost = gae_standard(
            inputs.costs,
            inputs.cost_value.current,
            inputs.cost_value.next,
            inputs.dones,
            gamma,
            lambda,
        )?;
        let adv_square = gae_square(
            inputs.costs,
            inputs.cost_value.next,
            inputs.cost_square.current,
            inputs.cost_square.next,
            inputs.dones,
            gamma,
            lambda,
        )?;
        let mut episode_starts = vec![0];
        for (t, d) in inputs.dones.iter().enumerate() {
            if d.is_done() && t + 1 < inputs.dones.len() {
                episode_starts.push(t + 1);
            }
        }
        if inputs.dones.is_empty() {
            episode_starts.clear();
        }
        Ok(Self {
            target_value: td_lambda_targets(inputs.value.current, &adv_reward),
            target_cost_value: td_lambda_targets(inputs.cost_value.current, &adv_cost),
            target_square: square_targets(inputs.cost_square.current, &adv_square),
            adv_reward,
            adv_cost,
            adv_square,
            episode_starts,
        })
    }

    pub fn len(&self) -> usize {
        self.adv_reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adv_reward.is_empty()
    }
}
