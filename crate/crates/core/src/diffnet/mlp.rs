//! Fully connected networks over a flat parameter vector.
//!
//! Parameters are laid out layer by layer: the `in×out` weight matrix in
//! row-major order followed by the `out` biases.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tape::{sigmoid, softplus, Var};
use super::DiffError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Linear,
    Sigmoid,
    Softplus,
}

/// Layer sizes and activations of an MLP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        input: usize,
        hidden: &[usize],
        output: usize,
        output_activation: OutputActivation,
    ) -> Result<Self, DiffError> {
        let mut layer_sizes = Vec::with_capacity(hidden.len() + 2);
        layer_sizes.push(input);
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(output);
        let spec = Self {
            layer_sizes,
            hidden_activation: HiddenActivation::Relu,
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DiffError> {
        if self.layer_sizes.len() < 3 {
            return Err(DiffError::InvalidSpec(
                "an MLP needs at least one hidden layer".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(DiffError::InvalidSpec("layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.layer_sizes[1..self.layer_sizes.len() - 1]
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|(i, o)| i * o + o).sum()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_sizes.windows(2).map(|w| (w[0], w[1]))
    }

    /// Uniform fan-in initialisation; the last layer is scaled by `output_scale`.
    pub fn init_params<R: Rng>(&self, rng: &mut R, output_scale: f64) -> Vec<f64> {
        let n_layers = self.layer_sizes.len() - 1;
        let mut params = Vec::with_capacity(self.param_count());
        for (layer, (fan_in, fan_out)) in self.layers().enumerate() {
            let mut bound = (6.0 / fan_in as f64).sqrt();
            if layer + 1 == n_layers {
                bound *= output_scale;
            }
            let dist = Uniform::new_inclusive(-bound, bound);
            params.extend((0..fan_in * fan_out).map(|_| dist.sample(rng)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        params
    }

    fn check(&self, params: &[f64], input_cols: usize) -> Result<(), DiffError> {
        if params.len() != self.param_count() {
            return Err(DiffError::DimensionMismatch {
                what: "parameter vector",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        if input_cols != self.input_dim() {
            return Err(DiffError::DimensionMismatch {
                what: "network input",
                expected: self.input_dim(),
                got: input_cols,
            });
        }
        Ok(())
    }

    /// Evaluates one input vector.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>, DiffError> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        Ok(self.forward_batch(params, x)?.into_raw_vec_and_offset().0)
    }

    /// Evaluates a batch, one input per row.
    pub fn forward_batch(
        &self,
        params: &[f64],
        input: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>, DiffError> {
        self.check(params, input.ncols())?;
        let n_layers = self.layer_sizes.len() - 1;
        let mut h = input.to_owned();
        let mut offset = 0;
        for (layer, (fan_in, fan_out)) in self.layers().enumerate() {
            let (w, b) = layer_view(params, offset, fan_in, fan_out);
            offset += fan_in * fan_out + fan_out;
            let mut z = h.dot(&w);
            z += &b;
            h = if layer + 1 == n_layers {
                self.apply_output(z)
            } else {
                z.mapv_into(|x| x.max(0.0))
            };
        }
        Ok(h)
    }

    /// Forward-mode derivative of the batch output along a parameter direction.
    ///
    /// Returns `(output, d output / d params · direction)`.
    pub fn jvp(
        &self,
        params: &[f64],
        direction: &[f64],
        input: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>), DiffError> {
        self.check(params, input.ncols())?;
        if direction.len() != params.len() {
            return Err(DiffError::DimensionMismatch {
                what: "tangent vector",
                expected: params.len(),
                got: direction.len(),
            });
        }
        let n_layers = self.layer_sizes.len() - 1;
        let mut h = input.to_owned();
        let mut dh = Array2::<f64>::zeros(h.dim());
        let mut offset = 0;
        for (layer, (fan_in, fan_out)) in self.layers().enumerate() {
            let (w, b) = layer_view(params, offset, fan_in, fan_out);
            let (dw, db) = layer_view(direction, offset, fan_in, fan_out);
            offset += fan_in * fan_out + fan_out;
            let mut z = h.dot(&w);
            z += &b;
            let mut dz = dh.dot(&w) + h.dot(&dw);
            dz += &db;
            if layer + 1 == n_layers {
                match self.output_activation {
                    OutputActivation::Linear => {}
                    OutputActivation::Sigmoid => {
                        Zip::from(&mut dz).and(&z).for_each(|d, &x| {
                            let s = sigmoid(x);
                            *d *= s * (1.0 - s);
                        });
                    }
                    OutputActivation::Softplus => {
                        Zip::from(&mut dz).and(&z).for_each(|d, &x| *d *= sigmoid(x));
                    }
                }
                h = self.apply_output(z);
            } else {
                Zip::from(&mut dz).and(&z).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                h = z.mapv_into(|x| x.max(0.0));
            }
            dh = dz;
        }
        Ok((h, dh))
    }

    /// Records the forward pass on a tape. `params` is a `1×n` row whose window
    /// starting at `offset` holds this network's parameters.
    pub fn forward_var<'t>(
        &self,
        params: Var<'t>,
        offset: usize,
        input: Var<'t>,
    ) -> Var<'t> {
        let n_layers = self.layer_sizes.len() - 1;
        let mut h = input;
        let mut at = offset;
        for (layer, (fan_in, fan_out)) in self.layers().enumerate() {
            let w = params.slice(at, fan_in, fan_out);
            let b = params.slice(at + fan_in * fan_out, 1, fan_out);
            at += fan_in * fan_out + fan_out;
            let z = h.matmul(w) + b;
            h = if layer + 1 == n_layers {
                match self.output_activation {
                    OutputActivation::Linear => z,
                    OutputActivation::Sigmoid => z.sigmoid(),
                    OutputActivation::Softplus => z.softplus(),
                }
            } else {
                z.relu()
            };
        }
        h
    }

    fn apply_output(&self, z: Array2<f64>) -> Array2<f64> {
        match self.output_activation {
            OutputActivation::Linear => z,
            OutputActivation::Sigmoid => z.mapv_into(sigmoid),
            OutputActivation::Softplus => z.mapv_into(softplus),
        }
    }
}

fn layer_view(
    params: &[f64],
    offset: usize,
    fan_in: usize,
    fan_out: usize,
) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
    let w = ArrayView2::from_shape((fan_in, fan_out), &params[offset..offset + fan_in * fan_out])
        .expect("weight view");
    let b_start = offset + fan_in * fan_out;
    let b = ArrayView2::from_shape((1, fan_out), &params[b_start..b_start + fan_out])
        .expect("bias view");
    (w, b)
}

/// Column `col` of a batch output as a vector.
pub fn column(out: &Array2<f64>, col: usize) -> Vec<f64> {
    out.index_axis(Axis(1), col).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Plain-loop recomputation used as the reference path.
    fn naive_forward(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut h = input.to_vec();
        let mut offset = 0;
        let n_layers = spec.layer_sizes.len() - 1;
        for layer in 0..n_layers {
            let (fan_in, fan_out) = (spec.layer_sizes[layer], spec.layer_sizes[layer + 1]);
            let mut z = vec![0.0; fan_out];
            for (j, zj) in z.iter_mut().enumerate() {
                let mut acc = params[offset + fan_in * fan_out + j];
                for (i, hi) in h.iter().enumerate() {
                    acc += hi * params[offset + i * fan_out + j];
                }
                *zj = acc;
            }
            offset += fan_in * fan_out + fan_out;
            h = if layer + 1 == n_layers {
                z.into_iter()
                    .map(|x| match spec.output_activation {
                        OutputActivation::Linear => x,
                        OutputActivation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
                        OutputActivation::Softplus => (1.0 + x.exp()).ln(),
                    })
                    .collect()
            } else {
                z.into_iter().map(|x| if x > 0.0 { x } else { 0.0 }).collect()
            };
        }
        h
    }

    #[test]
    fn zero_weights_linear_output_is_bias() {
        let spec = MlpSpec::new(3, &[4, 4], 2, OutputActivation::Linear).unwrap();
        let mut params = vec![0.0; spec.param_count()];
        let n = params.len();
        params[n - 2] = 0.7;
        params[n - 1] = -1.3;
        let out = spec.forward(&params, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.7, -1.3]);
    }

    #[test]
    fn softplus_head_is_strictly_positive() {
        let spec = MlpSpec::new(3, &[8], 4, OutputActivation::Softplus).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = spec.init_params(&mut rng, 5.0);
        for k in 0..50 {
            let x = [k as f64 - 25.0, 0.3 * k as f64, -2.0];
            let out = spec.forward(&params, &x).unwrap();
            assert!(out.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn batch_forward_matches_layer_by_layer_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for act in [
            OutputActivation::Linear,
            OutputActivation::Sigmoid,
            OutputActivation::Softplus,
        ] {
            let spec = MlpSpec::new(5, &[7, 6], 3, act).unwrap();
            let params = spec.init_params(&mut rng, 1.0);
            let input: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x = ArrayView2::from_shape((4, 5), &input).unwrap();
            let out = spec.forward_batch(&params, x).unwrap();
            for r in 0..4 {
                let reference = naive_forward(&spec, &params, &input[r * 5..r * 5 + 5]);
                for c in 0..3 {
                    assert!((out[[r, c]] - reference[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tape_forward_agrees_with_direct_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = MlpSpec::new(4, &[6, 5], 2, OutputActivation::Sigmoid).unwrap();
        let params = spec.init_params(&mut rng, 1.0);
        let input: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Array2::from_shape_vec((3, 4), input).unwrap();
        let direct = spec.forward_batch(&params, x.view()).unwrap();
        let tape = Tape::new();
        let p = tape.row_var(&params);
        let out = spec.forward_var(p, 0, tape.constant(x));
        assert!((out.value() - direct).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn jvp_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = MlpSpec::new(3, &[5, 4], 2, OutputActivation::Softplus).unwrap();
        let params = spec.init_params(&mut rng, 1.0);
        let dir: Vec<f64> = (0..params.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = ArrayView2::from_shape((3, 3), &input).unwrap();
        let (_, d) = spec.jvp(&params, &dir, x).unwrap();
        let h = 1e-6;
        let plus: Vec<f64> = params.iter().zip(&dir).map(|(p, v)| p + h * v).collect();
        let minus: Vec<f64> = params.iter().zip(&dir).map(|(p, v)| p - h * v).collect();
        let fd = (spec.forward_batch(&plus, x).unwrap() - spec.forward_batch(&minus, x).unwrap())
            / (2.0 * h);
        for (a, b) in d.iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        let spec = MlpSpec::new(3, &[4], 1, OutputActivation::Linear).unwrap();
        let params = vec![0.0; spec.param_count()];
        assert!(matches!(
            spec.forward(&params, &[1.0, 2.0]),
            Err(DiffError::DimensionMismatch { .. })
        ));
        assert!(spec.forward(&params[1..], &[1.0, 2.0, 3.0]).is_err());
        assert!(MlpSpec::new(3, &[], 1, OutputActivation::Linear).is_err());
        assert!(MlpSpec::new(3, &[0], 1, OutputActivation::Linear).is_err());
    }
}
