//! Exact computations on small finite MDPs.
//!
//! Everything here is solved with dense linear algebra, so these quantities
//! serve as ground truth for the estimators and bounds used elsewhere.

pub mod bounds;
pub mod ensemble;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TabularError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("linear system for {0} is singular")]
    Singular(&'static str),
}

/// Finite MDP with transition, reward and cost tensors indexed `[s][a][s']`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    transitions: Vec<f64>,
    rewards: Vec<f64>,
    costs: Vec<f64>,
    pub rho: Vec<f64>,
    pub gamma: f64,
}

impl TabularMdp {
    /// Tensors are flat in `[s][a][s']` order.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        costs: Vec<f64>,
        rho: Vec<f64>,
        gamma: f64,
    ) -> Result<Self, TabularError> {
        let bad = |m: String| Err(TabularError::InvalidMdp(m));
        if n_states == 0 || n_actions == 0 {
            return bad("need at least one state and one action".into());
        }
        let len = n_states * n_actions * n_states;
        for (name, t) in [("P", &transitions), ("R", &rewards), ("C", &costs)] {
            if t.len() != len {
                return bad(format!("{name} has {} entries, expected {len}", t.len()));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return bad(format!("{name} has non-finite entries"));
            }
        }
        if transitions.iter().any(|&p| p < 0.0) {
            return bad("negative transition probability".into());
        }
        for (row, chunk) in transitions.chunks(n_states).enumerate() {
            let total: f64 = chunk.iter().sum();
            if (total - 1.0).abs() > ROW_TOL {
                return bad(format!(
                    "P[{}, {}, :] sums to {total}",
                    row / n_actions,
                    row % n_actions
                ));
            }
        }
        if costs.iter().any(|&c| c < 0.0) {
            return bad("costs must be nonnegative".into());
        }
        if rho.len() != n_states
            || rho.iter().any(|&p| p < 0.0)
            || (rho.iter().sum::<f64>() - 1.0).abs() > ROW_TOL
        {
            return bad("rho must be a distribution over states".into());
        }
        if !(0.0..1.0).contains(&gamma) {
            return bad(format!("gamma = {gamma} must lie in [0, 1)"));
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            costs,
            rho,
            gamma,
        })
    }

    fn idx(&self, s: usize, a: usize, s2: usize) -> usize {
        (s * self.n_actions + a) * self.n_states + s2
    }

    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transitions[self.idx(s, a, s2)]
    }

    pub fn cost(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.costs[self.idx(s, a, s2)]
    }

    pub fn reward(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.rewards[self.idx(s, a, s2)]
    }

    /// `Σ_{s'} P(s'|s,a)·f(s, a, s')`
    pub fn expect_next<F: Fn(usize) -> f64>(&self, s: usize, a: usize, f: F) -> f64 {
        (0..self.n_states).map(|s2| self.p(s, a, s2) * f(s2)).sum()
    }

    /// State-to-state transition matrix under `pi`, rows indexed by `s`.
    pub fn p_pi(&self, pi: &TabularPolicy) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_states, self.n_states, |s, s2| {
            (0..self.n_actions).map(|a| pi.prob(s, a) * self.p(s, a, s2)).sum()
        })
    }

    fn check_policy(&self, pi: &TabularPolicy) -> Result<(), TabularError> {
        if pi.n_states != self.n_states || pi.n_actions != self.n_actions {
            return Err(TabularError::InvalidPolicy(format!(
                "policy is {}x{}, MDP is {}x{}",
                pi.n_states, pi.n_actions, self.n_states, self.n_actions
            )));
        }
        Ok(())
    }
}

/// Stochastic policy as an `[s][a]` probability table.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self, TabularError> {
        if probs.len() != n_states * n_actions {
            return Err(TabularError::InvalidPolicy(format!(
                "{} entries for {n_states}x{n_actions}",
                probs.len()
            )));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) || (total - 1.0).abs() > ROW_TOL {
                return Err(TabularError::InvalidPolicy(format!(
                    "row {s} is not a distribution (sum {total})"
                )));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self {
            n_states: actions.len(),
            n_actions,
            probs,
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// `(1 − η)·self + η·other`
    pub fn mix(&self, other: &Self, eta: f64) -> Self {
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (1.0 - eta) * a + eta * b)
            .collect();
        Self {
            n_states: self.n_states,
            n_actions: self.n_actions,
            probs,
        }
    }

    /// Total-variation distance between the two policies at state `s`.
    pub fn tv_at(&self, other: &Self, s: usize) -> f64 {
        0.5 * self
            .row(s)
            .iter()
            .zip(other.row(s))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// `max_s TV(other(·|s), self(·|s))`
    pub fn max_tv(&self, other: &Self) -> f64 {
        (0..self.n_states)
            .map(|s| self.tv_at(other, s))
            .fold(0.0, f64::max)
    }
}

/// Solves `(I − k·M) x = b`.
fn solve_resolvent(
    m: &DMatrix<f64>,
    k: f64,
    b: &DVector<f64>,
    what: &'static str,
) -> Result<DVector<f64>, TabularError> {
    let n = m.nrows();
    let a = DMatrix::identity(n, n) - m * k;
    a.lu().solve(b).ok_or(TabularError::Singular(what))
}

/// Discounted and doubly discounted state distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Distributions {
    pub d: DVector<f64>,
    pub d2: DVector<f64>,
}

/// `d = (1−γ)(I − γP_πᵀ)⁻¹ρ` and `d₂ = (1−γ²)(I − γ²P_πᵀ)⁻¹ρ`.
///
/// `P_π` has rows indexed by the current state, so the visitation recursion
/// propagates through its transpose.
pub fn exact_dists(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Distributions, TabularError> {
    mdp.check_policy(pi)?;
    let pt = mdp.p_pi(pi).transpose();
    let rho = DVector::from_column_slice(&mdp.rho);
    let g = mdp.gamma;
    let d = solve_resolvent(&pt, g, &rho, "d")? * (1.0 - g);
    let d2 = solve_resolvent(&pt, g * g, &rho, "d2")? * (1.0 - g * g);
    Ok(Distributions { d, d2 })
}

/// State values of reward, cost and cost square.
#[derive(Debug, Clone, PartialEq)]
pub struct Values {
    pub v: DVector<f64>,
    pub v_c: DVector<f64>,
    pub s_c: DVector<f64>,
}

pub fn exact_values(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Values, TabularError> {
    mdp.check_policy(pi)?;
    let n = mdp.n_states;
    let g = mdp.gamma;
    let p = mdp.p_pi(pi);
    let expected = |f: &dyn Fn(usize, usize, usize) -> f64| {
        DVector::from_fn(n, |s, _| {
            (0..mdp.n_actions)
                .map(|a| pi.prob(s, a) * mdp.expect_next(s, a, |s2| f(s, a, s2)))
                .sum()
        })
    };
    let r = expected(&|s, a, s2| mdp.reward(s, a, s2));
    let c = expected(&|s, a, s2| mdp.cost(s, a, s2));
    let v = solve_resolvent(&p, g, &r, "V")?;
    let v_c = solve_resolvent(&p, g, &c, "V_C")?;
    let q = expected(&|s, a, s2| {
        let cost = mdp.cost(s, a, s2);
        cost * cost + 2.0 * g * cost * v_c[s2]
    });
    let s_c = solve_resolvent(&p, g * g, &q, "S_C")?;
    Ok(Values { v, v_c, s_c })
}

/// `J_C(π) = ⟨ρ, V_C⟩`
pub fn exact_jc(mdp: &TabularMdp, values: &Values) -> f64 {
    mdp.rho.iter().zip(values.v_c.iter()).map(|(r, v)| r * v).sum()
}

/// `J_S` from the doubly discounted distribution:
/// `E_{d₂,π,P}[C² + 2γ·C·V_C(s')] / (1 − γ²)`.
pub fn exact_js(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64, TabularError> {
    let dists = exact_dists(mdp, pi)?;
    let values = exact_values(mdp, pi)?;
    Ok(js_from(mdp, pi, &dists, &values))
}

pub(crate) fn js_from(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    dists: &Distributions,
    values: &Values,
) -> f64 {
    let g = mdp.gamma;
    let mut total = 0.0;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            total += dists.d2[s]
                * pi.prob(s, a)
                * mdp.expect_next(s, a, |s2| {
                    let c = mdp.cost(s, a, s2);
                    c * c + 2.0 * g * c * values.v_c[s2]
                });
        }
    }
    total / (1.0 - g * g)
}

/// Action values and advantages of cost and cost square under a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionValues {
    pub q_c: DMatrix<f64>,
    pub q_s: DMatrix<f64>,
    pub a_c: DMatrix<f64>,
    pub a_s: DMatrix<f64>,
}

pub fn action_values(mdp: &TabularMdp, values: &Values) -> ActionValues {
    let (ns, na, g) = (mdp.n_states, mdp.n_actions, mdp.gamma);
    let q_c = DMatrix::from_fn(ns, na, |s, a| {
        mdp.expect_next(s, a, |s2| mdp.cost(s, a, s2) + g * values.v_c[s2])
    });
    let q_s = DMatrix::from_fn(ns, na, |s, a| {
        mdp.expect_next(s, a, |s2| {
            let c = mdp.cost(s, a, s2);
            c * c + 2.0 * g * c * values.v_c[s2] + g * g * values.s_c[s2]
        })
    });
    let a_c = DMatrix::from_fn(ns, na, |s, a| q_c[(s, a)] - values.v_c[s]);
    let a_s = DMatrix::from_fn(ns, na, |s, a| q_s[(s, a)] - values.s_c[s]);
    ActionValues { q_c, q_s, a_c, a_s }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_state(c: f64, gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![1.0], vec![0.0], vec![c], vec![1.0], gamma).unwrap()
    }

    #[test]
    fn single_state_closed_forms() {
        let (c, g) = (0.4, 0.8);
        let mdp = single_state(c, g);
        let pi = TabularPolicy::uniform(1, 1);
        let d = exact_dists(&mdp, &pi).unwrap();
        assert!((d.d[0] - 1.0).abs() < 1e-15 && (d.d2[0] - 1.0).abs() < 1e-15);
        let v = exact_values(&mdp, &pi).unwrap();
        assert!((v.v_c[0] - c / (1.0 - g)).abs() < 1e-12);
        assert!((v.s_c[0] - (c / (1.0 - g)).powi(2)).abs() < 1e-12);
        assert!((exact_js(&mdp, &pi).unwrap() - (c / (1.0 - g)).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn two_state_cycle_distribution() {
        // 0 -> 1 -> 0 deterministically: d = (1 − γ)(1, γ, γ², …) folded onto the cycle.
        let mdp = TabularMdp::new(
            2,
            1,
            vec![0.0, 1.0, 1.0, 0.0],
            vec![0.0; 4],
            vec![0.0; 4],
            vec![1.0, 0.0],
            0.5,
        )
        .unwrap();
        let pi = TabularPolicy::uniform(2, 1);
        let d = exact_dists(&mdp, &pi).unwrap().d;
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-14);
        let mut series = [0.0, 0.0];
        let mut w = 0.5;
        for t in 0..200 {
            series[t % 2] += w;
            w *= 0.5;
        }
        assert!((series[0] - d[0]).abs() < 1e-14);
    }

    #[test]
    fn zero_cost_mdp_has_zero_js() {
        let mdp = TabularMdp::new(
            2,
            2,
            vec![0.5; 8],
            vec![1.0; 8],
            vec![0.0; 8],
            vec![0.5, 0.5],
            0.9,
        )
        .unwrap();
        assert_eq!(exact_js(&mdp, &TabularPolicy::uniform(2, 2)).unwrap(), 0.0);
    }

    #[test]
    fn deterministic_mdp_has_zero_variance() {
        // Deterministic 3-cycle with state-dependent costs and a deterministic policy.
        let n = 3;
        let mut p = vec![0.0; n * 2 * n];
        let mut c = vec![0.0; n * 2 * n];
        for s in 0..n {
            for a in 0..2 {
                let s2 = (s + a + 1) % n;
                p[(s * 2 + a) * n + s2] = 1.0;
                c[(s * 2 + a) * n + s2] = 0.1 * (s + 2 * a + 1) as f64;
            }
        }
        let mdp = TabularMdp::new(n, 2, p, vec![0.0; 18], c, vec![0.0, 1.0, 0.0], 0.9).unwrap();
        let pi = TabularPolicy::deterministic(2, &[1, 0, 1]);
        let v = exact_values(&mdp, &pi).unwrap();
        for s in 0..n {
            assert!((v.s_c[s] - v.v_c[s].powi(2)).abs() < 1e-10);
        }
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        assert!(TabularMdp::new(1, 1, vec![0.9], vec![0.0], vec![0.0], vec![1.0], 0.5).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![0.0], vec![-0.1], vec![1.0], 0.5).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![0.0], vec![0.0], vec![1.0], 1.0).is_err());
        assert!(TabularPolicy::new(1, 2, vec![0.7, 0.7]).is_err());
        let mdp = single_state(0.1, 0.5);
        assert!(exact_values(&mdp, &TabularPolicy::uniform(2, 1)).is_err());
    }

    #[test]
    fn advantages_average_to_zero_under_the_policy() {
        let mdp = TabularMdp::new(
            2,
            2,
            vec![0.3, 0.7, 0.9, 0.1, 0.5, 0.5, 0.2, 0.8],
            vec![0.0; 8],
            vec![0.1, 0.9, 0.4, 0.3, 0.7, 0.2, 0.6, 0.5],
            vec![0.6, 0.4],
            0.9,
        )
        .unwrap();
        let pi = TabularPolicy::new(2, 2, vec![0.25, 0.75, 0.6, 0.4]).unwrap();
        let v = exact_values(&mdp, &pi).unwrap();
        let av = action_values(&mdp, &v);
        for s in 0..2 {
            let ac: f64 = (0..2).map(|a| pi.prob(s, a) * av.a_c[(s, a)]).sum();
            let as_: f64 = (0..2).map(|a| pi.prob(s, a) * av.a_s[(s, a)]).sum();
            assert!(ac.abs() < 1e-12 && as_.abs() < 1e-12);
        }
    }
}
