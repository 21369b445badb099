//! Backtracking along a proposed step until the true KL, constraint and
//! objective behave.

use super::StepType;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchConfig {
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
    /// Accepted KL is at most `kl_slack · δ`.
    pub kl_slack: f64,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            backtrack_ratio: 0.8,
            max_backtracks: 10,
            kl_slack: 1.5,
        }
    }
}

/// Batch estimates at a candidate parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub kl: f64,
    pub objective: f64,
    pub constraint: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchOutcome {
    /// Accepted fraction of the step, 0 if every candidate was rejected.
    pub scale: f64,
    pub params: Vec<f64>,
    pub evaluation: Evaluation,
    pub backtracks: usize,
}

fn acceptable(
    eval: &Evaluation,
    before: &Evaluation,
    step_type: StepType,
    delta: f64,
    threshold: f64,
    config: &LineSearchConfig,
) -> bool {
    let finite = eval.kl.is_finite() && eval.objective.is_finite() && eval.constraint.is_finite();
    if !finite || eval.kl > config.kl_slack * delta {
        return false;
    }
    match step_type {
        StepType::Recovery => eval.constraint <= before.constraint,
        StepType::Unconstrained | StepType::Constrained => {
            let constraint_ok = eval.constraint <= threshold.max(before.constraint);
            let objective_ok = before.constraint > threshold || eval.objective > before.objective;
            constraint_ok && objective_ok
        }
    }
}

/// Tries `params + βᵏ·direction` for `k = 0, 1, …` and returns the first
/// candidate that passes.
///
/// Every step must keep the KL within `kl_slack·δ`. Recovery steps must not
/// increase the constraint. Other steps must keep the constraint below
/// `max(threshold, before)` and, when the constraint was already satisfied,
/// improve the objective.
#[allow(clippy::too_many_arguments)]
pub fn line_search<E, F>(
    params: &[f64],
    direction: &[f64],
    step_type: StepType,
    delta: f64,
    threshold: f64,
    before: Evaluation,
    config: &LineSearchConfig,
    mut evaluate: F,
) -> Result<LineSearchOutcome, E>
where
    F: FnMut(&[f64]) -> Result<Evaluation, E>,
{
    if direction.iter().all(|&d| d == 0.0) {
        return Ok(LineSearchOutcome {
            scale: 1.0,
            params: params.to_vec(),
            evaluation: before,
            backtracks: 0,
        });
    }
    let mut scale = 1.0;
    for k in 0..config.max_backtracks {
        let candidate: Vec<f64> = params
            .iter()
            .zip(direction)
            .map(|(p, d)| p + scale * d)
            .collect();
        let eval = evaluate(&candidate)?;
        if acceptable(&eval, &before, step_type, delta, threshold, config) {
            return Ok(LineSearchOutcome {
                scale,
                params: candidate,
                evaluation: eval,
                backtracks: k,
            });
        }
        scale *= config.backtrack_ratio;
    }
    Ok(LineSearchOutcome {
        scale: 0.0,
        params: params.to_vec(),
        evaluation: before,
        backtracks: config.max_backtracks,
    })
}
