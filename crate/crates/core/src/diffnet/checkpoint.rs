//! Binary checkpoint format.
//!
//! Layout, all integers `u32` and all reals `f64`, little endian:
//!
//! ```text
//! "TRC1" obs_dim act_dim n_hidden hidden[n_hidden] flags
//! policy_mean_net[..] log_std[act_dim] value[..] cost_value[..] cost_square[..]
//! if flags & 1: norm_mean[obs_dim] norm_var[obs_dim] norm_count
//! if flags & 2: next_epoch env_steps(u64) then for value, cost_value, cost_square:
//!               adam_t(u64) adam_m[..] adam_v[..]
//!               then head_shift head_scale for each head
//! ```
//!
//! Every network shares the hidden sizes in the header.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::adam::AdamState;
use super::mlp::{MlpSpec, OutputActivation};
use super::policy::GaussianPolicy;
use super::DiffError;

const MAGIC: &[u8; 4] = b"TRC1";
const FLAG_NORMALIZER: u32 = 1;
const FLAG_TRAINER: u32 = 2;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint field `{field}`: {detail}")]
    Corrupt { field: &'static str, detail: String },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint describes an invalid network: {0}")]
    Network(#[from] DiffError),
}

fn corrupt(field: &'static str, detail: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt {
        field,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizerState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub next_epoch: u32,
    pub env_steps: u64,
    /// Optimizer state for the value, cost-value and cost-square heads.
    pub adam: [AdamState; 3],
    /// Output `(shift, scale)` of each head, in the same order.
    pub head_scales: [(f64, f64); 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
    /// Mean-network parameters followed by the log-std vector.
    pub policy: Vec<f64>,
    pub value: Vec<f64>,
    pub cost_value: Vec<f64>,
    pub cost_square: Vec<f64>,
    pub normalizer: Option<NormalizerState>,
    pub trainer: Option<TrainerState>,
}

/// Network shapes implied by a header.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub policy: GaussianPolicy,
    pub value: MlpSpec,
    pub cost_value: MlpSpec,
    pub cost_square: MlpSpec,
}

impl Architecture {
    pub fn new(obs_dim: usize, act_dim: usize, hidden: &[usize]) -> Result<Self, DiffError> {
        Ok(Self {
            policy: GaussianPolicy::new(obs_dim, hidden, act_dim)?,
            value: MlpSpec::new(obs_dim, hidden, 1, OutputActivation::Linear)?,
            cost_value: MlpSpec::new(obs_dim, hidden, 1, OutputActivation::Linear)?,
            cost_square: MlpSpec::new(obs_dim, hidden, 1, OutputActivation::Softplus)?,
        })
    }
}

impl Checkpoint {
    pub fn architecture(&self) -> Result<Architecture, DiffError> {
        Architecture::new(self.obs_dim, self.act_dim, &self.hidden)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let arch = self.architecture()?;
        let lens = [
            ("policy", arch.policy.param_count(), self.policy.len()),
            ("value", arch.value.param_count(), self.value.len()),
            ("cost_value", arch.cost_value.param_count(), self.cost_value.len()),
            ("cost_square", arch.cost_square.param_count(), self.cost_square.len()),
        ];
        for (field, expected, got) in lens {
            if expected != got {
                return Err(corrupt(
                    field,
                    format!("expected {expected} parameters, got {got}"),
                ));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.obs_dim);
        put_u32(&mut out, self.act_dim);
        put_u32(&mut out, self.hidden.len());
        for &h in &self.hidden {
            put_u32(&mut out, h);
        }
        let mut flags = 0;
        if self.normalizer.is_some() {
            flags |= FLAG_NORMALIZER;
        }
        if self.trainer.is_some() {
            flags |= FLAG_TRAINER;
        }
        out.extend_from_slice(&flags.to_le_bytes());
        for v in [&self.policy, &self.value, &self.cost_value, &self.cost_square] {
            put_f64s(&mut out, v);
        }
        if let Some(norm) = &self.normalizer {
            if norm.mean.len() != self.obs_dim || norm.var.len() != self.obs_dim {
                return Err(corrupt("normalizer", "statistics do not match obs_dim"));
            }
            put_f64s(&mut out, &norm.mean);
            put_f64s(&mut out, &norm.var);
            put_f64s(&mut out, &[norm.count]);
        }
        if let Some(tr) = &self.trainer {
            out.extend_from_slice(&tr.next_epoch.to_le_bytes());
            out.extend_from_slice(&tr.env_steps.to_le_bytes());
            let sizes = [self.value.len(), self.cost_value.len(), self.cost_square.len()];
            for (state, n) in tr.adam.iter().zip(sizes) {
                if state.m.len() != n || state.v.len() != n {
                    return Err(corrupt("adam", "moment length does not match its head"));
                }
                out.extend_from_slice(&state.t.to_le_bytes());
                put_f64s(&mut out, &state.m);
                put_f64s(&mut out, &state.v);
            }
            for &(shift, scale) in &tr.head_scales {
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(corrupt("head_scales", format!("non-positive scale {scale}")));
                }
                put_f64s(&mut out, &[shift, scale]);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(corrupt("magic", format!("expected TRC1, found {magic:?}")));
        }
        let obs_dim = r.dim("obs_dim")?;
        let act_dim = r.dim("act_dim")?;
        let n_hidden = r.u32("n_hidden")? as usize;
        if n_hidden == 0 || n_hidden > 64 {
            return Err(corrupt("n_hidden", format!("implausible layer count {n_hidden}")));
        }
        let hidden = (0..n_hidden)
            .map(|_| r.dim("hidden"))
            .collect::<Result<Vec<_>, _>>()?;
        let flags = r.u32("flags")?;
        if flags & !(FLAG_NORMALIZER | FLAG_TRAINER) != 0 {
            return Err(corrupt("flags", format!("unknown bits in {flags:#x}")));
        }
        let arch = Architecture::new(obs_dim, act_dim, &hidden)?;
        let policy = r.f64s(arch.policy.param_count(), "policy")?;
        let value = r.f64s(arch.value.param_count(), "value")?;
        let cost_value = r.f64s(arch.cost_value.param_count(), "cost_value")?;
        let cost_square = r.f64s(arch.cost_square.param_count(), "cost_square")?;
        let normalizer = if flags & FLAG_NORMALIZER != 0 {
            Some(NormalizerState {
                mean: r.f64s(obs_dim, "normalizer")?,
                var: r.f64s(obs_dim, "normalizer")?,
                count: r.f64s(1, "normalizer")?[0],
            })
        } else {
            None
        };
        let trainer = if flags & FLAG_TRAINER != 0 {
            let next_epoch = r.u32("next_epoch")?;
            let env_steps = r.u64("env_steps")?;
            let mut heads = Vec::with_capacity(3);
            for n in [value.len(), cost_value.len(), cost_square.len()] {
                let t = r.u64("adam")?;
                let m = r.f64s(n, "adam")?;
                let v = r.f64s(n, "adam")?;
                heads.push(AdamState { m, v, t });
            }
            let adam: [AdamState; 3] = heads.try_into().expect("three heads");
            let mut head_scales = [(0.0, 1.0); 3];
            for slot in &mut head_scales {
                let v = r.f64s(2, "head_scales")?;
                if !(v[1].is_finite() && v[1] > 0.0) {
                    return Err(corrupt("head_scales", format!("non-positive scale {}", v[1])));
                }
                *slot = (v[0], v[1]);
            }
            Some(TrainerState {
                next_epoch,
                env_steps,
                adam,
                head_scales,
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(corrupt(
                "trailer",
                format!("{} unexpected bytes after the last field", bytes.len() - r.pos),
            ));
        }
        Ok(Self {
            obs_dim,
            act_dim,
            hidden,
            policy,
            value,
            cost_value,
            cost_square,
            normalizer,
            trainer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(corrupt(
                field,
                format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64, CheckpointError> {
        let b = self.take(8, field)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn dim(&mut self, field: &'static str) -> Result<usize, CheckpointError> {
        let v = self.u32(field)?;
        if v == 0 || v > 1 << 16 {
            return Err(corrupt(field, format!("implausible size {v}")));
        }
        Ok(v as usize)
    }

    fn f64s(&mut self, n: usize, field: &'static str) -> Result<Vec<f64>, CheckpointError> {
        let b = self.take(n * 8, field)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
