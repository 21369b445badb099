//! Diagonal Gaussian policy with a sigmoid-squashed mean network and a
//! state-independent log standard deviation.
//!
//! Flat parameter layout: mean-network parameters followed by `act_dim`
//! log-std entries. The mean is `2·sigmoid(z) − 1`, so it lies in `[-1, 1]`.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::mlp::{MlpSpec, OutputActivation};
use super::tape::{Tape, Var};
use super::{DiffError, ParamVector};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GaussianPolicy {
    pub mean_net: MlpSpec,
}

impl GaussianPolicy {
    pub fn new(obs_dim: usize, hidden: &[usize], act_dim: usize) -> Result<Self, DiffError> {
        Ok(Self {
            mean_net: MlpSpec::new(obs_dim, hidden, act_dim, OutputActivation::Sigmoid)?,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.mean_net.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.mean_net.output_dim()
    }

    pub fn mean_param_count(&self) -> usize {
        self.mean_net.param_count()
    }

    pub fn param_count(&self) -> usize {
        self.mean_param_count() + self.act_dim()
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R, init_log_std: f64) -> ParamVector {
        let mut p = self.mean_net.init_params(rng, 0.01);
        p.extend(std::iter::repeat_n(init_log_std, self.act_dim()));
        ParamVector(p)
    }

    pub fn log_std<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.mean_param_count()..]
    }

    fn check(&self, params: &[f64]) -> Result<(), DiffError> {
        if params.len() != self.param_count() {
            return Err(DiffError::DimensionMismatch {
                what: "policy parameters",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        Ok(())
    }

    /// Action means for a batch of states (`n×obs_dim` → `n×act_dim`).
    pub fn mean_batch(
        &self,
        params: &[f64],
        states: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>, DiffError> {
        self.check(params)?;
        let s = self
            .mean_net
            .forward_batch(&params[..self.mean_param_count()], states)?;
        Ok(s.mapv_into(|v| 2.0 * v - 1.0))
    }

    pub fn mean(&self, params: &[f64], state: &[f64]) -> Result<Vec<f64>, DiffError> {
        let view = ArrayView2::from_shape((1, state.len()), state).expect("row view");
        Ok(self.mean_batch(params, view)?.into_raw_vec_and_offset().0)
    }

    /// Draws an unclipped action and returns it with its log-density.
    pub fn sample<R: Rng>(
        &self,
        params: &[f64],
        state: &[f64],
        rng: &mut R,
    ) -> Result<(Vec<f64>, f64), DiffError> {
        let mean = self.mean(params, state)?;
        let log_std = self.log_std(params);
        let action: Vec<f64> = mean
            .iter()
            .zip(log_std)
            .map(|(&mu, &ls)| {
                let eps: f64 = rng.sample(StandardNormal);
                mu + ls.exp() * eps
            })
            .collect();
        let lp = gaussian_log_density(&action, &mean, log_std);
        Ok((action, lp))
    }

    pub fn log_prob_batch(
        &self,
        params: &[f64],
        states: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>, DiffError> {
        let means = self.mean_batch(params, states)?;
        if actions.dim() != means.dim() {
            return Err(DiffError::DimensionMismatch {
                what: "action batch",
                expected: means.len(),
                got: actions.len(),
            });
        }
        let log_std = self.log_std(params);
        Ok(means
            .outer_iter()
            .zip(actions.outer_iter())
            .map(|(mu, a)| {
                gaussian_log_density(a.as_slice().unwrap_or(&a.to_vec()), &mu.to_vec(), log_std)
            })
            .collect())
    }

    /// Mean network on the tape, returning `n×act_dim` means.
    pub fn mean_var<'t>(&self, params: Var<'t>, states: Var<'t>) -> Var<'t> {
        self.mean_net.forward_var(params, 0, states) * 2.0 - 1.0
    }

    /// Log-density of each row of `actions` as an `n×1` tape variable.
    pub fn log_prob_var<'t>(&self, params: Var<'t>, states: Var<'t>, actions: Var<'t>) -> Var<'t> {
        let m = self.act_dim();
        let mean = self.mean_var(params, states);
        let log_std = params.slice(self.mean_param_count(), 1, m);
        let z = (actions - mean) * (-log_std).exp();
        z.square().sum_cols() * -0.5 - log_std.sum() - 0.5 * m as f64 * (2.0 * PI).ln()
    }

    /// Mean over states of `KL(π_old(·|s) ‖ π_new(·|s))`, old policy held fixed.
    pub fn kl_var<'t>(
        &self,
        tape: &'t Tape,
        old_means: &Array2<f64>,
        old_log_std: &[f64],
        params: Var<'t>,
        states: Var<'t>,
    ) -> Var<'t> {
        let m = self.act_dim();
        let n = old_means.nrows() as f64;
        let mu_new = self.mean_var(params, states);
        let ls_new = params.slice(self.mean_param_count(), 1, m);
        let ls_old = tape.constant(super::tape::row(old_log_std));
        let var_old = tape.constant(super::tape::row(
            &old_log_std.iter().map(|l| (2.0 * l).exp()).collect::<Vec<_>>(),
        ));
        let diff = tape.constant(old_means.clone()) - mu_new;
        let per = (ls_new - ls_old) + (var_old + diff.square()) / ((ls_new * 2.0).exp() * 2.0) - 0.5;
        per.sum() / n
    }

    /// Closed-form mean KL between two parameter vectors over `states`.
    pub fn kl(
        &self,
        old: &[f64],
        new: &[f64],
        states: ArrayView2<'_, f64>,
    ) -> Result<f64, DiffError> {
        let mu_o = self.mean_batch(old, states)?;
        let mu_n = self.mean_batch(new, states)?;
        let ls_o = self.log_std(old);
        let ls_n = self.log_std(new);
        let mut total = 0.0;
        for (ro, rn) in mu_o.outer_iter().zip(mu_n.outer_iter()) {
            for j in 0..self.act_dim() {
                total += diag_gaussian_kl(ro[j], ls_o[j], rn[j], ls_n[j]);
            }
        }
        Ok(total / states.nrows().max(1) as f64)
    }

    /// Fisher-vector product `(F + damping·I) v` at `params`, where `F` is the
    /// Hessian of the mean KL at `π_new = π_old`.
    ///
    /// For a diagonal Gaussian this Hessian is `Jᵀ M J / N` with `M` holding
    /// `1/σ²` for the mean outputs and `2` for each log-std, so it is assembled
    /// from a forward-mode JVP and one reverse sweep.
    pub fn fisher_vector_product(
        &self,
        params: &[f64],
        states: ArrayView2<'_, f64>,
        v: &[f64],
        damping: f64,
    ) -> Result<ParamVector, DiffError> {
        self.check(params)?;
        if v.len() != params.len() {
            return Err(DiffError::DimensionMismatch {
                what: "fisher-vector direction",
                expected: params.len(),
                got: v.len(),
            });
        }
        let k = self.mean_param_count();
        let m = self.act_dim();
        let n = states.nrows().max(1) as f64;
        let (_, dsig) = self.mean_net.jvp(&params[..k], &v[..k], states)?;
        let inv_var: Vec<f64> = self
            .log_std(params)
            .iter()
            .map(|l| (-2.0 * l).exp())
            .collect();
        let mut u = dsig * 2.0;
        for mut row in u.outer_iter_mut() {
            for j in 0..m {
                row[j] *= inv_var[j] / n;
            }
        }
        let tape = Tape::new();
        let p = tape.row_var(params);
        let mean = self.mean_var(p, tape.constant(states.to_owned()));
        let obj = (mean * tape.constant(u)).sum();
        let mut out = tape.gradient(obj).wrt(p).into_raw_vec_and_offset().0;
        for j in 0..m {
            out[k + j] += 2.0 * v[k + j];
        }
        for (o, vi) in out.iter_mut().zip(v) {
            *o += damping * vi;
        }
        Ok(ParamVector(out))
    }
}

pub fn gaussian_log_density(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let mut lp = -0.5 * action.len() as f64 * (2.0 * PI).ln();
    for ((&a, &mu), &ls) in action.iter().zip(mean).zip(log_std) {
        let z = (a - mu) * (-ls).exp();
        lp -= 0.5 * z * z + ls;
    }
    lp
}

/// `KL(N(μo, σo²) ‖ N(μn, σn²))` in one dimension.
pub fn diag_gaussian_kl(mu_o: f64, ls_o: f64, mu_n: f64, ls_n: f64) -> f64 {
    let var_o = (2.0 * ls_o).exp();
    let var_n = (2.0 * ls_n).exp();
    ls_n - ls_o + (var_o + (mu_o - mu_n).powi(2)) / (2.0 * var_n) - 0.5
}
