//! Randomized ensemble of small MDPs and policy pairs on which every bound is
//! evaluated exactly.
//!
//! The perturbed policy is a mixture `π' = (1 − η)π + ηq` with `η ≤ max_mix`,
//! so it stays near `π` the way a trust-region step does. The bounds are
//! first-order statements in `D^π(π')`; for unrelated policy pairs several of
//! them are violated.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use super::bounds::{
    check_lemma2, check_lemma3, check_theorem1, check_theorem2, corollary1_residual,
    lemma1_residual, surrogate_terms, BoundCheck, PolicyAnalysis, Theorem2Outcome,
};
use super::{TabularError, TabularMdp, TabularPolicy};
use crate::cvar::CvarError;

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub seed: u64,
    /// Number of triples per discount with a defined Gaussian CVaR.
    pub size: usize,
    pub gammas: Vec<f64>,
    pub alpha: f64,
    pub max_mix: f64,
    /// Multiplier on every inequality's right-hand side; below 1 it is a
    /// negative control.
    pub rhs_scale: f64,
    pub tolerance: f64,
    pub equality_tolerance: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 200,
            gammas: vec![0.5, 0.9],
            alpha: 0.125,
            max_mix: 0.5,
            rhs_scale: 1.0,
            tolerance: 1e-10,
            equality_tolerance: 1e-9,
        }
    }
}

/// Samples from the flat Dirichlet over `n` outcomes.
pub fn dirichlet_ones<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

fn renormalize(v: &mut [f64]) {
    let total: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Random MDP with `|S| ∈ {2..5}`, `|A| ∈ {2..3}`, flat-Dirichlet transitions
/// and uniform costs in `[0, 1]`.
pub fn random_mdp<R: Rng>(rng: &mut R, gamma: f64) -> TabularMdp {
    let ns = rng.gen_range(2..=5);
    let na = rng.gen_range(2..=3);
    random_mdp_sized(rng, ns, na, gamma)
}

pub fn random_mdp_sized<R: Rng>(rng: &mut R, ns: usize, na: usize, gamma: f64) -> TabularMdp {
    let mut p = Vec::with_capacity(ns * na * ns);
    for _ in 0..ns * na {
        let mut row = dirichlet_ones(rng, ns);
        renormalize(&mut row);
        p.extend(row);
    }
    let costs: Vec<f64> = (0..ns * na * ns).map(|_| rng.gen_range(0.0..=1.0)).collect();
    let rewards: Vec<f64> = (0..ns * na * ns).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let mut rho = dirichlet_ones(rng, ns);
    renormalize(&mut rho);
    TabularMdp::new(ns, na, p, rewards, costs, rho, gamma).expect("generated MDP is valid")
}

pub fn random_policy<R: Rng>(rng: &mut R, ns: usize, na: usize) -> TabularPolicy {
    let mut probs = Vec::with_capacity(ns * na);
    for _ in 0..ns {
        let mut row = dirichlet_ones(rng, na);
        renormalize(&mut row);
        probs.extend(row);
    }
    TabularPolicy::new(ns, na, probs).expect("generated policy is valid")
}

/// Aggregate outcome of one check over the ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckSummary {
    pub name: &'static str,
    pub checked: usize,
    pub failed: usize,
    pub skipped: usize,
    /// Smallest `rhs − lhs` observed (or the negated largest residual).
    pub worst_slack: f64,
}

impl CheckSummary {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checked: 0,
            failed: 0,
            skipped: 0,
            worst_slack: f64::INFINITY,
        }
    }

    fn record(&mut self, check: BoundCheck, tol: f64) {
        self.checked += 1;
        self.worst_slack = self.worst_slack.min(check.slack());
        if !check.holds(tol) {
            self.failed += 1;
        }
    }

    /// Records a quantity that should vanish.
    fn record_residual(&mut self, residual: f64, tol: f64) {
        self.record(
            BoundCheck {
                lhs: residual.abs(),
                rhs: 0.0,
            },
            tol,
        );
    }

    pub fn passed(&self) -> bool {
        self.failed == 0 && self.checked > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleReport {
    pub checks: Vec<CheckSummary>,
    pub triples: usize,
    pub attempts: usize,
}

impl EnsembleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckSummary::passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckSummary> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for EnsembleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<28} {:>7} {:>7} {:>7} {:>14}  result",
            "check", "checked", "failed", "skipped", "worst slack"
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<28} {:>7} {:>7} {:>7} {:>14.6e}  {}",
                c.name,
                c.checked,
                c.failed,
                c.skipped,
                c.worst_slack,
                if c.passed() { "PASS" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "{} triples from {} draws: {}",
            self.triples,
            self.attempts,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Tabular(#[from] TabularError),
    #[error(transparent)]
    Cvar(#[from] CvarError),
    #[error("only {found} of {wanted} triples had a defined Gaussian CVaR after {attempts} draws")]
    TooFewTriples {
        found: usize,
        wanted: usize,
        attempts: usize,
    },
}

pub const CHECK_NAMES: [&str; 9] = [
    "js-identity",
    "lemma1",
    "corollary1",
    "lemma2",
    "lemma3",
    "theorem1",
    "theorem2",
    "theorem1-equality",
    "theorem2-equality",
];

pub fn run_ensemble(config: &EnsembleConfig) -> Result<EnsembleReport, EnsembleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut checks: Vec<CheckSummary> = CHECK_NAMES.iter().map(|n| CheckSummary::new(n)).collect();
    let tol = config.tolerance;
    let eq_tol = config.equality_tolerance;
    let scale = config.rhs_scale;
    let mut triples = 0;
    let mut attempts = 0;
    for &gamma in &config.gammas {
        let mut found = 0;
        let max_attempts = 50 * config.size.max(1);
        let mut tries = 0;
        while found < config.size {
            if tries >= max_attempts {
                return Err(EnsembleError::TooFewTriples {
                    found,
                    wanted: config.size,
                    attempts: tries,
                });
            }
            tries += 1;
            let mdp = random_mdp(&mut rng, gamma);
            let (ns, na) = (mdp.n_states, mdp.n_actions);
            let pi = random_policy(&mut rng, ns, na);
            let q = random_policy(&mut rng, ns, na);
            let eta = config.max_mix * (1.0 - rng.gen::<f64>());
            let pi_new = pi.mix(&q, eta);
            let f: Vec<f64> = (0..ns).map(|_| rng.gen_range(-5.0..5.0)).collect();

            let old = PolicyAnalysis::new(&mdp, &pi)?;
            let new = PolicyAnalysis::new(&mdp, &pi_new)?;
            let terms = surrogate_terms(&mdp, &pi, &pi_new, &old);
            let t2 = check_theorem2(&mdp, &new, &terms, config.alpha)?;
            let t2 = match t2 {
                Theorem2Outcome::Checked(b) => b,
                Theorem2Outcome::Skipped { .. } => {
                    checks[6].skipped += 1;
                    continue;
                }
            };
            found += 1;

            let rho_s: f64 = mdp.rho.iter().zip(old.values.s_c.iter()).map(|(r, s)| r * s).sum();
            checks[0].record_residual(old.j_s - rho_s, 1e-9);
            let vc: Vec<f64> = old.values.v_c.iter().copied().collect();
            let residual = lemma1_residual(&mdp, &pi, &old.dists, &f)
                .abs()
                .max(lemma1_residual(&mdp, &pi, &old.dists, &vc).abs());
            checks[1].record_residual(residual, tol);
            checks[2].record_residual(corollary1_residual(&mdp, &pi, &old, &f), tol);
            checks[3].record(
                check_lemma2(&mdp, &pi, &pi_new, &old, &new).with_rhs_scale(scale),
                tol,
            );
            checks[4].record(
                check_lemma3(&mdp, &pi, &pi_new, &old, &new).with_rhs_scale(scale),
                tol,
            );
            checks[5].record(check_theorem1(&mdp, &old, &new, &terms).with_rhs_scale(scale), tol);
            checks[6].record(t2.with_rhs_scale(scale), tol);

            let same = surrogate_terms(&mdp, &pi, &pi, &old);
            let e1 = check_theorem1(&mdp, &old, &old, &same);
            checks[7].record_residual(e1.lhs - e1.rhs, eq_tol);
            match check_theorem2(&mdp, &old, &same, config.alpha)? {
                Theorem2Outcome::Checked(b) => checks[8].record_residual(b.lhs - b.rhs, eq_tol),
                Theorem2Outcome::Skipped { .. } => checks[8].skipped += 1,
            }
        }
        triples += found;
        attempts += tries;
    }
    Ok(EnsembleReport {
        checks,
        triples,
        attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dirichlet_samples_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..6 {
            let d = dirichlet_ones(&mut rng, n);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(d.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn small_ensemble_passes() {
        let report = run_ensemble(&EnsembleConfig {
            size: 10,
            ..EnsembleConfig::default()
        })
        .unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.triples, 20);
    }

    #[test]
    fn halved_rhs_is_caught() {
        let report = run_ensemble(&EnsembleConfig {
            size: 20,
            rhs_scale: 0.5,
            ..EnsembleConfig::default()
        })
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn ensemble_is_deterministic() {
        let cfg = EnsembleConfig {
            size: 5,
            ..EnsembleConfig::default()
        };
        assert_eq!(run_ensemble(&cfg).unwrap(), run_ensemble(&cfg).unwrap());
    }
}
