//! Exact evaluation of both sides of the policy-improvement bounds.

use nalgebra::DVector;

use super::{
    action_values, exact_dists, exact_jc, exact_values, js_from, ActionValues, Distributions,
    TabularError, TabularMdp, TabularPolicy, Values,
};
use crate::cvar::{cvar_coefficient, EPS_VAR};

/// The two sides of an inequality `lhs ≤ rhs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
}

impl BoundCheck {
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.lhs <= self.rhs + tol
    }

    /// Same check with the right-hand side scaled; a negative control.
    pub fn with_rhs_scale(self, scale: f64) -> Self {
        Self {
            lhs: self.lhs,
            rhs: self.rhs * scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Theorem2Outcome {
    Checked(BoundCheck),
    /// The Gaussian form is undefined for the true or surrogate variance.
    Skipped { true_var: f64, surrogate_var: f64 },
}

/// Exact quantities of one policy, reused across checks.
#[derive(Debug, Clone)]
pub struct PolicyAnalysis {
    pub dists: Distributions,
    pub values: Values,
    pub action_values: ActionValues,
    pub j_c: f64,
    pub j_s: f64,
}

impl PolicyAnalysis {
    pub fn new(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Self, TabularError> {
        let dists = exact_dists(mdp, pi)?;
        let values = exact_values(mdp, pi)?;
        let action_values = action_values(mdp, &values);
        let j_c = exact_jc(mdp, &values);
        let j_s = js_from(mdp, pi, &dists, &values);
        Ok(Self {
            dists,
            values,
            action_values,
            j_c,
            j_s,
        })
    }
}

/// `(1−γ²)E_ρ[f] + γ²E_{d₂,π,P}[f(s')] − E_{d₂}[f]`, which vanishes for every `f`.
pub fn lemma1_residual(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    dists: &Distributions,
    f: &[f64],
) -> f64 {
    let g2 = mdp.gamma * mdp.gamma;
    let e_rho: f64 = mdp.rho.iter().zip(f).map(|(r, v)| r * v).sum();
    let mut e_next = 0.0;
    let mut e_d2 = 0.0;
    for s in 0..mdp.n_states {
        e_d2 += dists.d2[s] * f[s];
        for a in 0..mdp.n_actions {
            e_next += dists.d2[s] * pi.prob(s, a) * mdp.expect_next(s, a, |s2| f[s2]);
        }
    }
    (1.0 - g2) * e_rho + g2 * e_next - e_d2
}

/// `J_S` rewritten around an arbitrary state function `f`; returns
/// `|J_S − (E_ρ[f] + E_{d₂,π,P}[C² + 2γCV_C(s') + γ²f(s') − f(s)] / (1−γ²))|`.
pub fn corollary1_residual(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    analysis: &PolicyAnalysis,
    f: &[f64],
) -> f64 {
    let g = mdp.gamma;
    let e_rho: f64 = mdp.rho.iter().zip(f).map(|(r, v)| r * v).sum();
    let mut e = 0.0;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            e += analysis.dists.d2[s]
                * pi.prob(s, a)
                * mdp.expect_next(s, a, |s2| {
                    let c = mdp.cost(s, a, s2);
                    c * c + 2.0 * g * c * analysis.values.v_c[s2] + g * g * f[s2] - f[s]
                });
        }
    }
    (analysis.j_s - (e_rho + e / (1.0 - g * g))).abs()
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `‖V_C^{π'} − V_C^π‖∞ ≤ 2‖V_C^π‖∞·D/(1−γ)` as stated. This form can fail;
/// see [`lemma2_q_bound`].
pub fn check_lemma2(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_new: &TabularPolicy,
    old: &PolicyAnalysis,
    new: &PolicyAnalysis,
) -> BoundCheck {
    let lhs = sup_norm(&(&new.values.v_c - &old.values.v_c));
    let rhs = 2.0 * sup_norm(&old.values.v_c) * pi.max_tv(pi_new) / (1.0 - mdp.gamma);
    BoundCheck { lhs, rhs }
}

/// The same inequality with `max |Q_C^π|` in place of `‖V_C^π‖∞`, which is
/// what the Hölder step actually bounds.
pub fn lemma2_q_bound(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_new: &TabularPolicy,
    old: &PolicyAnalysis,
    new: &PolicyAnalysis,
) -> BoundCheck {
    let lhs = sup_norm(&(&new.values.v_c - &old.values.v_c));
    let q_max = old
        .action_values
        .q_c
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let rhs = 2.0 * q_max * pi.max_tv(pi_new) / (1.0 - mdp.gamma);
    BoundCheck { lhs, rhs }
}

/// `TV(d₂^{π'}, d₂^π) ≤ γ²/(1−γ²)·D`
pub fn check_lemma3(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_new: &TabularPolicy,
    old: &PolicyAnalysis,
    new: &PolicyAnalysis,
) -> BoundCheck {
    let g2 = mdp.gamma * mdp.gamma;
    let lhs = 0.5 * (&new.dists.d2 - &old.dists.d2).abs().sum();
    let rhs = g2 / (1.0 - g2) * pi.max_tv(pi_new);
    BoundCheck { lhs, rhs }
}

/// `Σ_s w(s) Σ_a π'(a|s)·adv(s,a)`
fn expect_under(
    weights: &DVector<f64>,
    pi_new: &TabularPolicy,
    adv: &nalgebra::DMatrix<f64>,
) -> f64 {
    (0..weights.len())
        .map(|s| weights[s] * (0..adv.ncols()).map(|a| pi_new.prob(s, a) * adv[(s, a)]).sum::<f64>())
        .sum()
}

/// `max_s Σ_a π'(a|s)·adv(s,a)`
fn max_expected(pi_new: &TabularPolicy, adv: &nalgebra::DMatrix<f64>) -> f64 {
    (0..adv.nrows())
        .map(|s| (0..adv.ncols()).map(|a| pi_new.prob(s, a) * adv[(s, a)]).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Surrogate terms of `π'` built from `π`'s exact quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateTerms {
    pub j_c: f64,
    pub j_s: f64,
    pub max_tv: f64,
    pub eps_s: f64,
    pub eps_c: f64,
}

pub fn surrogate_terms(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_new: &TabularPolicy,
    old: &PolicyAnalysis,
) -> SurrogateTerms {
    let g = mdp.gamma;
    let g2 = g * g;
    let av = &old.action_values;
    let j_c = old.j_c + expect_under(&old.dists.d, pi_new, &av.a_c) / (1.0 - g);
    let j_s = old.j_s + expect_under(&old.dists.d2, pi_new, &av.a_s) / (1.0 - g2);
    let mut expected_cost = 0.0;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            expected_cost += old.dists.d2[s]
                * pi_new.prob(s, a)
                * mdp.expect_next(s, a, |s2| mdp.cost(s, a, s2));
        }
    }
    let eps_s = g2 / (1.0 - g2) * max_expected(pi_new, &av.a_s)
        + 2.0 * g * sup_norm(&old.values.v_c) / (1.0 - g) * expected_cost;
    let eps_c = max_expected(pi_new, &av.a_c);
    SurrogateTerms {
        j_c,
        j_s,
        max_tv: pi.max_tv(pi_new),
        eps_s,
        eps_c,
    }
}

/// `J_S(π') − J_S(π) ≤ E_{d₂^π,π'}[A_S]/(1−γ²) + 2ε_S·D/(1−γ²)`
pub fn check_theorem1(
    mdp: &TabularMdp,
    old: &PolicyAnalysis,
    new: &PolicyAnalysis,
    terms: &SurrogateTerms,
) -> BoundCheck {
    let g2 = mdp.gamma * mdp.gamma;
    BoundCheck {
        lhs: new.j_s - old.j_s,
        rhs: (terms.j_s - old.j_s) + 2.0 * terms.eps_s * terms.max_tv / (1.0 - g2),
    }
}

/// Gaussian CVaR of `π'` against the surrogate CVaR plus the divergence penalty.
pub fn check_theorem2(
    mdp: &TabularMdp,
    new: &PolicyAnalysis,
    terms: &SurrogateTerms,
    alpha: f64,
) -> Result<Theorem2Outcome, crate::cvar::CvarError> {
    let g = mdp.gamma;
    let coef = cvar_coefficient(alpha)?;
    let true_var = new.j_s - new.j_c * new.j_c;
    let surrogate_var = terms.j_s - terms.j_c * terms.j_c;
    if true_var <= EPS_VAR || surrogate_var < 0.0 {
        return Ok(Theorem2Outcome::Skipped {
            true_var,
            surrogate_var,
        });
    }
    let d = terms.max_tv;
    let eps_cvar = terms.eps_s
        + (terms.j_c - g * terms.eps_c / (1.0 - g).powi(2) * d) * 2.0 * g * (1.0 + g)
            / (1.0 - g)
            * terms.eps_c;
    let lhs = new.j_c + coef * true_var.sqrt();
    let rhs = terms.j_c
        + coef * surrogate_var.sqrt()
        + 2.0 / (1.0 - g)
            * (g * terms.eps_c / (1.0 - g) + coef / true_var.sqrt() * eps_cvar / (1.0 + g))
            * d;
    Ok(Theorem2Outcome::Checked(BoundCheck { lhs, rhs }))
}
