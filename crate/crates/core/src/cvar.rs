//! Gaussian CVaR, standard-normal utilities, empirical cost moments and the
//! differentiable CVaR constraint surrogate.

use std::f64::consts::{PI, SQRT_2};

use ndarray::ArrayView2;
use thiserror::Error;

use crate::diffnet::{grad_scalar, DiffError, GaussianPolicy, ParamVector, Tape, Var};

/// Variance floor applied before taking `√(J_S − J_C²)`.
pub const EPS_VAR: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum CvarError {
    #[error("{what} = {value} is outside its domain {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("cost statistics need at least one episode")]
    EmptyBatch,
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("importance ratio is not finite at sample {index}")]
    NonFiniteRatio { index: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Risk level, per-step cost limit and discount of the CVaR constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskSpec {
    pub alpha: f64,
    pub limit: f64,
    pub gamma: f64,
}

impl Default for RiskSpec {
    fn default() -> Self {
        Self {
            alpha: 0.125,
            limit: 0.025,
            gamma: 0.99,
        }
    }
}

impl RiskSpec {
    pub fn validate(&self) -> Result<(), CvarError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(CvarError::Domain {
                what: "alpha",
                value: self.alpha,
                domain: "(0, 1]",
            });
        }
        if self.limit.is_nan() || self.limit < 0.0 {
            return Err(CvarError::Domain {
                what: "limit",
                value: self.limit,
                domain: "[0, inf)",
            });
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(CvarError::Domain {
                what: "gamma",
                value: self.gamma,
                domain: "[0, 1)",
            });
        }
        Ok(())
    }

    /// Bound on the discounted cost sum, `d / (1 − γ)`.
    pub fn threshold(&self) -> f64 {
        self.limit / (1.0 - self.gamma)
    }
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard-normal quantile: Acklam's rational approximation refined by one
/// Newton step on `Φ`.
pub fn normal_quantile(p: f64) -> Result<f64, CvarError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(CvarError::Domain {
            what: "p",
            value: p,
            domain: "(0, 1)",
        });
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - P_LOW {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    let err = if p < 0.5 {
        normal_cdf(x) - p
    } else {
        (1.0 - p) - 0.5 * libm::erfc(x / SQRT_2)
    };
    Ok(x - err / normal_pdf(x))
}

/// `φ(Φ⁻¹(α)) / α`, the multiplier on σ in the Gaussian CVaR.
pub fn cvar_coefficient(alpha: f64) -> Result<f64, CvarError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(CvarError::Domain {
            what: "alpha",
            value: alpha,
            domain: "(0, 1]",
        });
    }
    if alpha == 1.0 {
        return Ok(0.0);
    }
    Ok(normal_pdf(normal_quantile(alpha)?) / alpha)
}

/// Upper-tail CVaR of `N(μ, σ²)` at level α.
pub fn cvar_gaussian(mu: f64, sigma: f64, alpha: f64) -> Result<f64, CvarError> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(CvarError::Domain {
            what: "sigma",
            value: sigma,
            domain: "[0, inf)",
        });
    }
    Ok(mu + sigma * cvar_coefficient(alpha)?)
}

/// First and second moments of the discounted cost sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostStats {
    pub j_c: f64,
    pub j_s: f64,
    pub sigma_c: f64,
}

impl CostStats {
    pub fn from_moments(j_c: f64, j_s: f64) -> Self {
        Self {
            j_c,
            j_s,
            sigma_c: (j_s - j_c * j_c).max(EPS_VAR).sqrt(),
        }
    }

    pub fn cvar(&self, alpha: f64) -> Result<f64, CvarError> {
        cvar_gaussian(self.j_c, self.sigma_c, alpha)
    }
}

/// Costs of one episode and, for a truncated episode, the cost-value and
/// cost-square estimates at the final state.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeCosts<'a> {
    pub costs: &'a [f64],
    pub bootstrap: Option<(f64, f64)>,
}

/// Empirical `J_C` and `J_S` over episodes, with truncated tails filled in
/// from the value heads.
pub fn estimate_cost_stats(episodes: &[EpisodeCosts<'_>], gamma: f64) -> Result<CostStats, CvarError> {
    if episodes.is_empty() {
        return Err(CvarError::EmptyBatch);
    }
    let mut sum_g = 0.0;
    let mut sum_g2 = 0.0;
    for ep in episodes {
        let mut g = 0.0;
        let mut disc = 1.0;
        for &c in ep.costs {
            g += disc * c;
            disc *= gamma;
        }
        let (g_full, g2) = match ep.bootstrap {
            Some((v_c, s_c)) => (
                g + disc * v_c,
                g * g + 2.0 * disc * g * v_c + disc * disc * s_c,
            ),
            None => (g, g * g),
        };
        sum_g += g_full;
        sum_g2 += g2;
    }
    let n = episodes.len() as f64;
    Ok(CostStats::from_moments(sum_g / n, sum_g2 / n))
}

/// Per-sample data the constraint surrogates are evaluated on.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateBatch<'a> {
    pub states: ArrayView2<'a, f64>,
    pub actions: ArrayView2<'a, f64>,
    pub old_log_probs: &'a [f64],
    pub adv_cost: &'a [f64],
    pub adv_square: &'a [f64],
    /// Weights for the cost expectation, summing to one.
    pub cost_weights: &'a [f64],
    /// Weights for the cost-square expectation, summing to one.
    pub square_weights: &'a [f64],
}

impl SurrogateBatch<'_> {
    fn validate(&self) -> Result<(), CvarError> {
        let n = self.states.nrows();
        if n == 0 {
            return Err(CvarError::EmptyBatch);
        }
        for (what, got) in [
            ("actions", self.actions.nrows()),
            ("old_log_probs", self.old_log_probs.len()),
            ("adv_cost", self.adv_cost.len()),
            ("adv_square", self.adv_square.len()),
            ("cost_weights", self.cost_weights.len()),
            ("square_weights", self.square_weights.len()),
        ] {
            if got != n {
                return Err(CvarError::LengthMismatch {
                    what,
                    expected: n,
                    got,
                });
            }
        }
        Ok(())
    }
}

/// Surrogate estimates of `J_C` and `J_S` for the new policy, built from
/// old-policy samples. At `params = old` both reduce to the empirical stats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateMoments {
    pub j_c: f64,
    pub j_s: f64,
}

fn ratios_minus_one<'t>(
    tape: &'t Tape,
    policy: &GaussianPolicy,
    params: Var<'t>,
    batch: &SurrogateBatch<'_>,
) -> Var<'t> {
    let n = batch.states.nrows();
    let lp = policy.log_prob_var(
        params,
        tape.constant(batch.states.to_owned()),
        tape.constant(batch.actions.to_owned()),
    );
    let old = tape.constant(column(batch.old_log_probs, n));
    (lp - old).exp() - 1.0
}

fn column(values: &[f64], n: usize) -> ndarray::Array2<f64> {
    ndarray::Array2::from_shape_vec((n, 1), values.to_vec()).expect("column shape")
}

fn moments_var<'t>(
    tape: &'t Tape,
    policy: &GaussianPolicy,
    params: Var<'t>,
    batch: &SurrogateBatch<'_>,
    stats: &CostStats,
    gamma: f64,
) -> (Var<'t>, Var<'t>) {
    let n = batch.states.nrows();
    let excess = ratios_minus_one(tape, policy, params, batch);
    let weighted = |w: &[f64], a: &[f64]| column(&w.iter().zip(a).map(|(w, a)| w * a).collect::<Vec<_>>(), n);
    let jc = (excess * tape.constant(weighted(batch.cost_weights, batch.adv_cost))).sum()
        * (1.0 / (1.0 - gamma))
        + stats.j_c;
    let js = (excess * tape.constant(weighted(batch.square_weights, batch.adv_square))).sum()
        * (1.0 / (1.0 - gamma * gamma))
        + stats.j_s;
    (jc, js)
}

/// Surrogate CVaR `J_C(π) + coef·√max(J_S(π) − J_C(π)², ε)` and its gradient.
pub fn cvar_surrogate(
    policy: &GaussianPolicy,
    params: &[f64],
    batch: &SurrogateBatch<'_>,
    stats: &CostStats,
    risk: &RiskSpec,
) -> Result<(f64, ParamVector), CvarError> {
    batch.validate()?;
    let coef = cvar_coefficient(risk.alpha)?;
    let result = grad_scalar(params, |tape, p| {
        let (jc, js) = moments_var(tape, policy, p, batch, stats, risk.gamma);
        let sigma = (js - jc.square()).clamp_min(EPS_VAR).sqrt();
        jc + sigma * coef
    });
    map_ratio_error(result)
}

/// Surrogate expected cost `J_C(π)` and its gradient; the constraint of the
/// expectation-constrained baseline.
pub fn expectation_surrogate(
    policy: &GaussianPolicy,
    params: &[f64],
    batch: &SurrogateBatch<'_>,
    stats: &CostStats,
    gamma: f64,
) -> Result<(f64, ParamVector), CvarError> {
    batch.validate()?;
    let result = grad_scalar(params, |tape, p| {
        moments_var(tape, policy, p, batch, stats, gamma).0
    });
    map_ratio_error(result)
}

fn map_ratio_error(
    result: Result<(f64, ParamVector), DiffError>,
) -> Result<(f64, ParamVector), CvarError> {
    match result {
        Err(DiffError::NonFiniteLoss { .. }) => Err(CvarError::NonFiniteRatio { index: 0 }),
        other => Ok(other?),
    }
}

/// Surrogate moments evaluated without a tape, for line-search checks.
pub fn surrogate_moments(
    policy: &GaussianPolicy,
    params: &[f64],
    batch: &SurrogateBatch<'_>,
    stats: &CostStats,
    gamma: f64,
) -> Result<SurrogateMoments, CvarError> {
    batch.validate()?;
    let lp = policy.log_prob_batch(params, batch.states, batch.actions)?;
    let mut jc = 0.0;
    let mut js = 0.0;
    for (i, (&l, &l_old)) in lp.iter().zip(batch.old_log_probs).enumerate() {
        let excess = (l - l_old).exp() - 1.0;
        if !excess.is_finite() {
            return Err(CvarError::NonFiniteRatio { index: i });
        }
        jc += excess * batch.cost_weights[i] * batch.adv_cost[i];
        js += excess * batch.square_weights[i] * batch.adv_square[i];
    }
    Ok(SurrogateMoments {
        j_c: stats.j_c + jc / (1.0 - gamma),
        j_s: stats.j_s + js / (1.0 - gamma * gamma),
    })
}

impl SurrogateMoments {
    pub fn cvar(&self, alpha: f64) -> Result<f64, CvarError> {
        let sigma = (self.j_s - self.j_c * self.j_c).max(EPS_VAR).sqrt();
        cvar_gaussian(self.j_c, sigma, alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Bisection on Φ, independent of the rational approximation.
    fn bisect_quantile(p: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if normal_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_of_half_is_zero() {
        assert!(normal_quantile(0.5).unwrap().abs() < 1e-15);
    }

    #[test]
    fn quantile_round_trips_through_cdf() {
        for k in 1..100 {
            let p = k as f64 / 100.0;
            let x = normal_quantile(p).unwrap();
            assert!((normal_cdf(x) - p).abs() < 1e-8, "p = {p}");
        }
    }

    #[test]
    fn quantile_matches_bisection() {
        assert!((normal_quantile(0.975).unwrap() - 1.959964).abs() < 1e-5);
        for p in [1e-10, 1e-5, 0.001, 0.02, 0.0243, 0.0245, 0.3, 0.77, 0.9999, 1.0 - 1e-9] {
            let x = normal_quantile(p).unwrap();
            assert!((x - bisect_quantile(p)).abs() < 1e-8, "p = {p}: {x}");
        }
    }

    #[test]
    fn quantile_rejects_closed_endpoints() {
        for p in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(normal_quantile(p).is_err());
        }
    }

    #[test]
    fn cvar_at_alpha_one_is_the_mean() {
        assert_eq!(cvar_gaussian(1.5, 3.0, 1.0).unwrap(), 1.5);
    }

    #[test]
    fn cvar_at_half_is_twice_the_density_at_zero() {
        // E[X | X ≥ 0] for a standard normal, by trapezoid integration.
        let h = 1e-4;
        let mut integral = 0.0;
        let mut x = 0.0;
        while x < 12.0 {
            integral += 0.5 * h * (x * normal_pdf(x) + (x + h) * normal_pdf(x + h));
            x += h;
        }
        let v = cvar_gaussian(0.0, 1.0, 0.5).unwrap();
        assert!((v - 0.79788).abs() < 1e-4);
        assert!((v - integral / 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_positive_alpha_is_a_domain_error() {
        assert!(matches!(
            cvar_gaussian(0.0, 1.0, 0.0),
            Err(CvarError::Domain { what: "alpha", .. })
        ));
        assert!(cvar_gaussian(0.0, 1.0, -0.5).is_err());
        assert!(cvar_gaussian(0.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn cost_stats_examples() {
        let ones = [1.0, 1.0, 1.0];
        let s = estimate_cost_stats(
            &[EpisodeCosts {
                costs: &ones,
                bootstrap: None,
            }],
            0.5,
        )
        .unwrap();
        assert!((s.j_c - 1.75).abs() < 1e-15);
        assert!((s.j_s - 3.0625).abs() < 1e-15);

        let zeros = [0.0; 5];
        let s = estimate_cost_stats(
            &[EpisodeCosts {
                costs: &zeros,
                bootstrap: None,
            }],
            0.9,
        )
        .unwrap();
        assert_eq!((s.j_c, s.j_s), (0.0, 0.0));
        assert!((s.sigma_c - EPS_VAR.sqrt()).abs() < 1e-18);

        let two = [2.0];
        let s = estimate_cost_stats(
            &[
                EpisodeCosts {
                    costs: &zeros[..1],
                    bootstrap: None,
                },
                EpisodeCosts {
                    costs: &two,
                    bootstrap: None,
                },
            ],
            0.9,
        )
        .unwrap();
        assert_eq!((s.j_c, s.j_s, s.sigma_c), (1.0, 2.0, 1.0));
        assert_eq!(estimate_cost_stats(&[], 0.9), Err(CvarError::EmptyBatch));
    }

    #[test]
    fn truncation_bootstrap_matches_an_extended_episode() {
        // A constant-cost tail bootstrapped from its exact value and square.
        let gamma: f64 = 0.8;
        let c = 0.3;
        let tail_v = c / (1.0 - gamma);
        let head = [c; 4];
        let s = estimate_cost_stats(
            &[EpisodeCosts {
                costs: &head,
                bootstrap: Some((tail_v, tail_v * tail_v)),
            }],
            gamma,
        )
        .unwrap();
        assert!((s.j_c - tail_v).abs() < 1e-12);
        assert!((s.j_s - tail_v * tail_v).abs() < 1e-12);
    }

    struct Fixture {
        policy: GaussianPolicy,
        params: Vec<f64>,
        states: Array2<f64>,
        actions: Array2<f64>,
        old_lp: Vec<f64>,
        adv_c: Vec<f64>,
        adv_s: Vec<f64>,
        cost_weights: Vec<f64>,
        weights: Vec<f64>,
    }

    impl Fixture {
        fn new(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let policy = GaussianPolicy::new(3, &[5], 2).unwrap();
            let params = policy.init_params(&mut rng, -0.5).0;
            let params: Vec<f64> = params.iter().map(|p| p + rng.gen_range(-0.3..0.3)).collect();
            let n = 12;
            let states = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
            let mut actions = Array2::zeros((n, 2));
            for i in 0..n {
                let (a, _) = policy
                    .sample(&params, &states.row(i).to_vec(), &mut rng)
                    .unwrap();
                actions[[i, 0]] = a[0];
                actions[[i, 1]] = a[1];
            }
            let old_lp = policy
                .log_prob_batch(&params, states.view(), actions.view())
                .unwrap();
            let adv_c = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let adv_s = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let raw: Vec<f64> = (0..n).map(|i| 0.81f64.powi(i as i32 % 4)).collect();
            let total: f64 = raw.iter().sum();
            let weights = raw.iter().map(|w| w / total).collect();
            let raw: Vec<f64> = (0..n).map(|i| 0.9f64.powi(i as i32 % 4)).collect();
            let total: f64 = raw.iter().sum();
            let cost_weights = raw.iter().map(|w| w / total).collect();
            Self {
                policy,
                params,
                states,
                actions,
                old_lp,
                adv_c,
                adv_s,
                cost_weights,
                weights,
            }
        }

        fn batch(&self) -> SurrogateBatch<'_> {
            SurrogateBatch {
                states: self.states.view(),
                actions: self.actions.view(),
                old_log_probs: &self.old_lp,
                adv_cost: &self.adv_c,
                adv_square: &self.adv_s,
                cost_weights: &self.cost_weights,
                square_weights: &self.weights,
            }
        }
    }

    #[test]
    fn surrogate_at_old_policy_equals_gaussian_cvar() {
        let f = Fixture::new(3);
        let stats = CostStats::from_moments(1.2, 2.5);
        let risk = RiskSpec {
            alpha: 0.125,
            limit: 0.025,
            gamma: 0.99,
        };
        let (v, _) = cvar_surrogate(&f.policy, &f.params, &f.batch(), &stats, &risk).unwrap();
        let expected = cvar_gaussian(stats.j_c, stats.sigma_c, risk.alpha).unwrap();
        assert!((v - expected).abs() < 1e-10);
    }

    #[test]
    fn surrogate_at_alpha_one_is_the_expectation_surrogate() {
        let f = Fixture::new(4);
        let stats = CostStats::from_moments(0.7, 1.0);
        let risk = RiskSpec {
            alpha: 1.0,
            limit: 0.025,
            gamma: 0.95,
        };
        let q: Vec<f64> = f.params.iter().map(|p| p * 1.05).collect();
        let (v1, g1) = cvar_surrogate(&f.policy, &q, &f.batch(), &stats, &risk).unwrap();
        let (v2, g2) = expectation_surrogate(&f.policy, &q, &f.batch(), &stats, 0.95).unwrap();
        assert!((v1 - v2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_and_direct_moments_agree() {
        let f = Fixture::new(5);
        let stats = CostStats::from_moments(0.4, 0.3);
        let risk = RiskSpec {
            alpha: 0.25,
            limit: 0.025,
            gamma: 0.9,
        };
        let q: Vec<f64> = f.params.iter().map(|p| p + 0.02).collect();
        let (v, _) = cvar_surrogate(&f.policy, &q, &f.batch(), &stats, &risk).unwrap();
        let m = surrogate_moments(&f.policy, &q, &f.batch(), &stats, 0.9).unwrap();
        assert!((v - m.cvar(0.25).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let f = Fixture::new(6);
        let stats = CostStats::from_moments(0.5, 0.6);
        let risk = RiskSpec {
            alpha: 0.125,
            limit: 0.025,
            gamma: 0.9,
        };
        let value = |p: &[f64]| {
            surrogate_moments(&f.policy, p, &f.batch(), &stats, risk.gamma)
                .unwrap()
                .cvar(risk.alpha)
                .unwrap()
        };
        let (_, g) = cvar_surrogate(&f.policy, &f.params, &f.batch(), &stats, &risk).unwrap();
        let h = 1e-5;
        for i in 0..f.params.len() {
            let mut pp = f.params.clone();
            pp[i] += h;
            let mut pm = f.params.clone();
            pm[i] -= h;
            let fd = (value(&pp) - value(&pm)) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs());
            assert!(
                (fd - g[i]).abs() <= 1e-4 * denom || (fd - g[i]).abs() < 1e-9,
                "{i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let f = Fixture::new(7);
        let mut batch = f.batch();
        batch.adv_cost = &f.adv_c[..3];
        let stats = CostStats::from_moments(0.0, 0.0);
        let err = cvar_surrogate(&f.policy, &f.params, &batch, &stats, &RiskSpec::default())
            .unwrap_err();
        assert!(matches!(err, CvarError::LengthMismatch { what: "adv_cost", .. }));
    }
}
