use crate::diffnet::checkpoint::NormalizerState;

const CLIP: f64 = 10.0;

/// Running per-feature mean and variance of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    mean: Vec<f64>,
    var: Vec<f64>,
    count: f64,
}

impl Normalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    /// Merges the statistics of a batch (parallel-variance update).
    pub fn update<'a, I>(&mut self, rows: I)
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let d = self.dim();
        let mut n = 0.0;
        let mut sum = vec![0.0; d];
        let mut rows_buf: Vec<&[f64]> = Vec::new();
        for row in rows {
            for (s, x) in sum.iter_mut().zip(row) {
                *s += x;
            }
            rows_buf.push(row);
            n += 1.0;
        }
        if n == 0.0 {
            return;
        }
        let batch_mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut m2 = vec![0.0; d];
        for row in rows_buf {
            for j in 0..d {
                m2[j] += (row[j] - batch_mean[j]).powi(2);
            }
        }
        let total = self.count + n;
        for j in 0..d {
            let delta = batch_mean[j] - self.mean[j];
            let old_m2 = self.var[j] * self.count;
            let new_m2 = old_m2 + m2[j] + delta * delta * self.count * n / total;
            self.mean[j] += delta * n / total;
            self.var[j] = new_m2 / total;
        }
        self.count = total;
    }

    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .enumerate()
            .map(|(j, x)| self.normalize_one(j, *x))
            .collect()
    }

    pub fn normalize_into(&self, obs: &[f64], out: &mut [f64]) {
        for (j, (o, x)) in out.iter_mut().zip(obs).enumerate() {
            *o = self.normalize_one(j, *x);
        }
    }

    fn normalize_one(&self, j: usize, x: f64) -> f64 {
        if self.count == 0.0 {
            return x.clamp(-CLIP, CLIP);
        }
        ((x - self.mean[j]) / (self.var[j] + 1e-8).sqrt()).clamp(-CLIP, CLIP)
    }

    pub fn state(&self) -> NormalizerState {
        NormalizerState {
            mean: self.mean.clone(),
            var: self.var.clone(),
            count: self.count,
        }
    }

    pub fn from_state(state: &NormalizerState) -> Self {
        Self {
            mean: state.mean.clone(),
            var: state.var.clone(),
            count: state.count,
        }
    }
}
