use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffnet::adam::{Adam, AdamState};
use crate::diffnet::tape::{sigmoid, softplus};
use crate::diffnet::{grad_scalar, DiffError, MlpSpec, OutputActivation, ParamVector};

/// Regression loss of a value head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadLoss {
    /// `(target − prediction)²`.
    Squared,
    /// `(√prediction − √target)²`, for the cost-square head.
    SquareRoot,
}

const SQRT_FLOOR: f64 = 1e-12;

/// Per-sample loss on plain numbers.
pub fn sample_loss(loss: HeadLoss, prediction: f64, target: f64) -> f64 {
    match loss {
        HeadLoss::Squared => (target - prediction).powi(2),
        HeadLoss::SquareRoot => (prediction.max(SQRT_FLOOR).sqrt() - target.max(0.0).sqrt()).powi(2),
    }
}

/// Adaptive output normalization of a head. The network's last affine layer
/// produces `z`, and the head predicts `act(shift + scale·z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadScale {
    pub shift: f64,
    pub scale: f64,
}

impl Default for HeadScale {
    fn default() -> Self {
        Self::IDENTITY
    }
}

const SCALE_FLOOR: f64 = 1e-3;
const SOFTPLUS_FLOOR: f64 = 1e-6;

impl HeadScale {
    pub const IDENTITY: Self = Self {
        shift: 0.0,
        scale: 1.0,
    };

    /// Statistics that put `targets` at roughly zero mean and unit spread in
    /// pre-activation space.
    pub fn from_targets(targets: &[f64], activation: OutputActivation) -> Self {
        if targets.is_empty() {
            return Self::IDENTITY;
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        let shift = match activation {
            OutputActivation::Linear => mean,
            OutputActivation::Softplus => {
                let m = mean.max(SOFTPLUS_FLOOR);
                m + (-(-m).exp_m1()).ln()
            }
            OutputActivation::Sigmoid => {
                let m = mean.clamp(1e-6, 1.0 - 1e-6);
                (m / (1.0 - m)).ln()
            }
        };
        Self {
            shift,
            scale: var.sqrt().max(SCALE_FLOOR),
        }
    }

    fn apply(&self, activation: OutputActivation, z: f64) -> f64 {
        let u = self.shift + self.scale * z;
        match activation {
            OutputActivation::Linear => u,
            OutputActivation::Sigmoid => sigmoid(u),
            OutputActivation::Softplus => softplus(u),
        }
    }

    /// Rewrites the last layer of `params` so that switching from `self` to
    /// `next` leaves every prediction unchanged.
    pub fn carry_over(&self, spec: &MlpSpec, params: &mut [f64], next: HeadScale) {
        let sizes = &spec.layer_sizes;
        let (fan_in, fan_out) = (sizes[sizes.len() - 2], sizes[sizes.len() - 1]);
        let start = params.len() - fan_in * fan_out - fan_out;
        let ratio = self.scale / next.scale;
        let (w, b) = params[start..].split_at_mut(fan_in * fan_out);
        w.iter_mut().for_each(|x| *x *= ratio);
        b.iter_mut()
            .for_each(|x| *x = (self.shift + self.scale * *x - next.shift) / next.scale);
    }
}

fn linear(spec: &MlpSpec) -> MlpSpec {
    MlpSpec {
        output_activation: OutputActivation::Linear,
        ..spec.clone()
    }
}

/// Head predictions for every row of `inputs`.
pub fn predict(
    spec: &MlpSpec,
    params: &[f64],
    scale: HeadScale,
    inputs: ArrayView2<'_, f64>,
) -> Result<Vec<f64>, DiffError> {
    let z = linear(spec).forward_batch(params, inputs)?;
    Ok(z.column(0)
        .iter()
        .map(|&z| scale.apply(spec.output_activation, z))
        .collect())
}

/// Mean loss over a batch and its gradient.
pub fn loss_and_grad(
    spec: &MlpSpec,
    params: &[f64],
    scale: HeadScale,
    inputs: ArrayView2<'_, f64>,
    targets: &[f64],
    loss: HeadLoss,
) -> Result<(f64, ParamVector), DiffError> {
    let n = inputs.nrows();
    if targets.len() != n {
        return Err(DiffError::DimensionMismatch {
            what: "value targets",
            expected: n,
            got: targets.len(),
        });
    }
    let target_col = match loss {
        HeadLoss::Squared => targets.to_vec(),
        HeadLoss::SquareRoot => targets.iter().map(|t| t.max(0.0).sqrt()).collect(),
    };
    let target_col = ndarray::Array2::from_shape_vec((n, 1), target_col).expect("column shape");
    let inputs = inputs.to_owned();
    let net = linear(spec);
    grad_scalar(params, |tape, p| {
        let u = net.forward_var(p, 0, tape.constant(inputs)) * scale.scale + scale.shift;
        let out = match spec.output_activation {
            OutputActivation::Linear => u,
            OutputActivation::Sigmoid => u.sigmoid(),
            OutputActivation::Softplus => u.softplus(),
        };
        let t = tape.constant(target_col);
        match loss {
            HeadLoss::Squared => (out - t).square().mean(),
            HeadLoss::SquareRoot => (out.clamp_min(SQRT_FLOOR).sqrt() - t).square().mean(),
        }
    })
}

/// Mean loss without a gradient.
pub fn batch_loss(
    spec: &MlpSpec,
    params: &[f64],
    scale: HeadScale,
    inputs: ArrayView2<'_, f64>,
    targets: &[f64],
    loss: HeadLoss,
) -> Result<f64, DiffError> {
    let out = predict(spec, params, scale, inputs)?;
    let n = targets.len().max(1) as f64;
    Ok(out
        .iter()
        .zip(targets)
        .map(|(&p, &t)| sample_loss(loss, p, t))
        .sum::<f64>()
        / n)
}

/// Mini-batch settings for value regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub sweeps: usize,
    pub minibatch: usize,
}

/// Adam on shuffled mini-batches for `sweeps` passes over the data. Returns
/// the mean mini-batch loss of each sweep.
#[allow(clippy::too_many_arguments)]
pub fn fit_head<R: Rng>(
    spec: &MlpSpec,
    params: &mut [f64],
    scale: HeadScale,
    adam: &Adam,
    state: &mut AdamState,
    inputs: ArrayView2<'_, f64>,
    targets: &[f64],
    loss: HeadLoss,
    fit: FitConfig,
    rng: &mut R,
) -> Result<Vec<f64>, DiffError> {
    let n = inputs.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(fit.sweeps);
    let size = fit.minibatch.max(1);
    for _ in 0..fit.sweeps {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(size) {
            let x = inputs.select(Axis(0), idx);
            let y: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
            let (value, grad) = loss_and_grad(spec, params, scale, x.view(), &y, loss)?;
            adam.step(state, params, &grad);
            total += value;
            batches += 1;
        }
        history.push(if batches == 0 { 0.0 } else { total / batches as f64 });
    }
    Ok(history)
}
