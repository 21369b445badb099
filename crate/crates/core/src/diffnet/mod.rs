//! Differentiable building blocks: autodiff tape, MLPs, the Gaussian policy head,
//! optimizers and the checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod mlp;
pub mod policy;
pub mod tape;

use std::ops::{Deref, DerefMut};

use thiserror::Error;

pub use mlp::{HiddenActivation, MlpSpec, OutputActivation};
pub use policy::GaussianPolicy;
pub use tape::{Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("loss is not finite ({value}); {context}")]
    NonFiniteLoss { value: f64, context: String },
    #[error("gradient has {count} non-finite entries (first at index {first})")]
    NonFiniteGradient { count: usize, first: usize },
}

/// Flat vector of network parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Self) {
        for (s, xi) in self.iter_mut().zip(x.iter()) {
            *s += alpha * xi;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(self.iter().map(|v| v * alpha).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParamVector {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Value and reverse-mode gradient of a scalar function of `params`.
///
/// The closure receives the tape and the parameters as a `1×n` row and must
/// return a `1×1` variable.
pub fn grad_scalar<F>(params: &[f64], loss: F) -> Result<(f64, ParamVector), DiffError>
where
    F: for<'t> FnOnce(&'t Tape, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let p = tape.row_var(params);
    let out = loss(&tape, p);
    let shape = out.shape();
    if shape != (1, 1) {
        return Err(DiffError::DimensionMismatch {
            what: "loss output",
            expected: 1,
            got: shape.0 * shape.1,
        });
    }
    let value = out.scalar();
    if !value.is_finite() {
        return Err(DiffError::NonFiniteLoss {
            value,
            context: format!("{} parameters, {} recorded ops", params.len(), tape.len()),
        });
    }
    let grad = tape.gradient(out).wrt(p).into_raw_vec_and_offset().0;
    check_finite(&grad)?;
    Ok((value, ParamVector(grad)))
}

pub(crate) fn check_finite(values: &[f64]) -> Result<(), DiffError> {
    let bad: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_finite())
        .map(|(i, _)| i)
        .collect();
    match bad.first() {
        None => Ok(()),
        Some(&first) => Err(DiffError::NonFiniteGradient {
            count: bad.len(),
            first,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn half_squared_norm_has_params_as_gradient() {
        let params = vec![0.5, -1.5, 2.0, 3.25];
        let (v, g) = grad_scalar(&params, |_, p| p.square().sum() * 0.5).unwrap();
        assert!((v - 0.5 * (0.25 + 2.25 + 4.0 + 10.5625)).abs() < 1e-14);
        assert_eq!(g.0, params);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = vec![1.0, 2.0, 3.0];
        let (v, g) = grad_scalar(&params, |t, _| t.constant(Array2::from_elem((1, 1), 4.0)))
            .unwrap();
        assert_eq!(v, 4.0);
        assert_eq!(g.0, vec![0.0; 3]);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let err = grad_scalar(&[-1.0], |_, p| p.ln().sum()).unwrap_err();
        assert!(matches!(err, DiffError::NonFiniteLoss { .. }));
    }

    #[test]
    fn mlp_regression_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = MlpSpec::new(4, &[8, 6], 2, OutputActivation::Linear).unwrap();
        let params = spec.init_params(&mut rng, 1.0);
        let x = Array2::from_shape_fn((10, 4), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((10, 2), |_| rng.gen_range(-1.0..1.0));
        let loss = |p: &[f64]| {
            let out = spec.forward_batch(p, x.view()).unwrap();
            (&out - &y).mapv(|d| d * d).mean().unwrap()
        };
        let (v, g) = grad_scalar(&params, |t, p| {
            let out = spec.forward_var(p, 0, t.constant(x.clone()));
            (out - t.constant(y.clone())).square().mean()
        })
        .unwrap();
        assert!((v - loss(&params)).abs() < 1e-14);
        let h = 1e-5;
        for i in 0..params.len() {
            let mut pp = params.clone();
            pp[i] += h;
            let mut pm = params.clone();
            pm[i] -= h;
            let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-8);
            assert!(
                (fd - g[i]).abs() / denom < 1e-4 || (fd - g[i]).abs() < 1e-9,
                "param {i}: fd {fd} vs ad {}",
                g[i]
            );
        }
    }

    #[test]
    fn param_vector_arithmetic() {
        let mut a = ParamVector(vec![1.0, 2.0]);
        let b = ParamVector(vec![3.0, -1.0]);
        assert_eq!(a.dot(&b), 1.0);
        a.axpy(2.0, &b);
        assert_eq!(a.0, vec![7.0, 0.0]);
        assert_eq!(b.scaled(-1.0).0, vec![-3.0, 1.0]);
        assert!((ParamVector(vec![3.0, 4.0]).norm() - 5.0).abs() < 1e-15);
    }
}
