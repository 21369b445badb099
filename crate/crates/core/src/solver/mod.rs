//! Trust-region step for a linear objective, one linear constraint and a
//! quadratic KL model, solved through its two-variable dual.
//!
//! The primal problem is
//!
//! ```text
//! max gᵀΔ  s.t.  c + bᵀΔ ≤ 0,  ½ΔᵀHΔ ≤ δ
//! ```
//!
//! and with `q = gᵀH⁻¹g`, `r = gᵀH⁻¹b`, `s = bᵀH⁻¹b` the dual is
//! `min_{λ>0, ν≥0} (q − 2νr + ν²s)/(2λ) + λδ − νc`, whose optimum gives
//! `Δ = H⁻¹(g − νb)/λ`.

pub mod cg;
pub mod line_search;

use thiserror::Error;

use crate::diffnet::{DiffError, ParamVector};

pub use cg::conjugate_gradient;
pub use line_search::{line_search, Evaluation, LineSearchConfig, LineSearchOutcome};

/// Below this, `q` or `s` are treated as zero.
const EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("operator is not positive definite at CG iteration {iteration} (pᵀAp = {curvature})")]
    NotPositiveDefinite { iteration: usize, curvature: f64 },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("gradient lengths differ: g has {g}, b has {b}")]
    LengthMismatch { g: usize, b: usize },
    #[error("trust radius must be positive, got {0}")]
    Radius(f64),
    #[error(transparent)]
    Operator(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepType {
    Unconstrained,
    Constrained,
    Recovery,
}

impl StepType {
    pub fn as_str(self) -> &'static str {
        match self {
            StepType::Unconstrained => "unconstrained",
            StepType::Constrained => "constrained",
            StepType::Recovery => "recovery",
        }
    }
}

impl std::fmt::Display for StepType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StepType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "unconstrained" => Ok(StepType::Unconstrained),
            "constrained" => Ok(StepType::Constrained),
            "recovery" => Ok(StepType::Recovery),
            other => Err(format!("unknown step type `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            cg_iters: 20,
            cg_tol: 1e-8,
            damping: 0.01,
        }
    }
}

/// Linearized objective and constraint with the (damped) KL metric.
pub struct SubproblemData<'a> {
    pub g: ParamVector,
    pub b: ParamVector,
    /// Constraint value minus its threshold; positive means violated.
    pub c: f64,
    pub delta: f64,
    pub fvp: &'a dyn Fn(&ParamVector) -> Result<ParamVector, DiffError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverResult {
    pub direction: ParamVector,
    pub step_type: StepType,
    pub nu: f64,
    pub lambda: f64,
    /// Set by the line search; 1 until then.
    pub accepted_scale: f64,
    pub q: f64,
    pub r: f64,
    pub s: f64,
}

/// Dual objective as a function of `λ` with `ν` eliminated.
struct Dual {
    q: f64,
    r: f64,
    s: f64,
    c: f64,
    delta: f64,
}

impl Dual {
    fn nu(&self, lambda: f64) -> f64 {
        ((lambda * self.c + self.r) / self.s).max(0.0)
    }

    fn value(&self, lambda: f64, nu: f64) -> f64 {
        (self.q - 2.0 * nu * self.r + nu * nu * self.s) / (2.0 * lambda) + lambda * self.delta
            - nu * self.c
    }

    /// Minimizes over `λ` by checking the branch with `ν > 0` and the branch
    /// with `ν = 0`, each restricted to the `λ` range where it applies.
    fn solve(&self) -> (f64, f64) {
        let (q, r, s, c, delta) = (self.q, self.r, self.s, self.c, self.delta);
        let a = (q - r * r / s).max(0.0);
        let b = 2.0 * delta - c * c / s;
        let lam_a_free = (a / b).sqrt();
        let lam_b_free = (q / (2.0 * delta)).sqrt();
        // ν > 0 exactly when λc + r > 0; the boundary sits at λ = −r/c.
        let mid = if c != 0.0 { -r / c } else { f64::NAN };
        let mut candidates: Vec<f64> = Vec::with_capacity(2);
        if c > 0.0 {
            candidates.push(if mid > 0.0 { lam_a_free.max(mid) } else { lam_a_free });
            if mid > 0.0 {
                candidates.push(lam_b_free.min(mid));
            }
        } else if c < 0.0 {
            if mid > 0.0 {
                candidates.push(lam_a_free.min(mid));
                candidates.push(lam_b_free.max(mid));
            } else {
                candidates.push(lam_b_free);
            }
        } else if r > 0.0 {
            candidates.push(lam_a_free);
        } else {
            candidates.push(lam_b_free);
        }
        let mut best = (f64::NAN, f64::NAN, f64::INFINITY);
        for lam in candidates {
            let lam = lam.max(EPS);
            if !lam.is_finite() {
                continue;
            }
            let nu = self.nu(lam);
            let v = self.value(lam, nu);
            if v < best.2 {
                best = (lam, nu, v);
            }
        }
        (best.0, best.1)
    }
}

/// Solves the linearized trust-region subproblem.
pub fn solve(sub: &SubproblemData<'_>, config: &SolverConfig) -> Result<SolverResult, SolverError> {
    if sub.g.len() != sub.b.len() {
        return Err(SolverError::LengthMismatch {
            g: sub.g.len(),
            b: sub.b.len(),
        });
    }
    if sub.delta.is_nan() || sub.delta <= 0.0 {
        return Err(SolverError::Radius(sub.delta));
    }
    if !sub.g.is_finite() || !sub.b.is_finite() || !sub.c.is_finite() {
        return Err(SolverError::NonFinite("subproblem input"));
    }
    let apply = |v: &ParamVector| (sub.fvp)(v).map_err(SolverError::from);
    let x_g = conjugate_gradient(apply, &sub.g, config.cg_iters, config.cg_tol)?;
    let x_b = conjugate_gradient(apply, &sub.b, config.cg_iters, config.cg_tol)?;
    let q = sub.g.dot(&x_g);
    let r = sub.g.dot(&x_b);
    let s = sub.b.dot(&x_b);
    let delta = sub.delta;
    let c = sub.c;
    let n = sub.g.len();
    let result = |direction: ParamVector, step_type, nu, lambda| SolverResult {
        direction,
        step_type,
        nu,
        lambda,
        accepted_scale: 1.0,
        q,
        r,
        s,
    };
    let recovery = || {
        let scale = (2.0 * delta / s).sqrt();
        result(x_b.scaled(-scale), StepType::Recovery, 0.0, 0.0)
    };
    let b_vanishes = s <= EPS;

    if q <= EPS {
        return Ok(if c > 0.0 && !b_vanishes {
            recovery()
        } else {
            result(ParamVector::zeros(n), StepType::Unconstrained, 0.0, 0.0)
        });
    }
    let lam_free = (q / (2.0 * delta)).sqrt();
    // Case (i): the natural-gradient step already satisfies the constraint.
    if b_vanishes || c + r / lam_free <= 0.0 {
        if b_vanishes && c > 0.0 {
            // No direction changes the constraint; nothing can restore it.
            return Ok(result(ParamVector::zeros(n), StepType::Recovery, 0.0, 0.0));
        }
        return Ok(result(x_g.scaled(1.0 / lam_free), StepType::Unconstrained, 0.0, lam_free));
    }
    // Case (iii): the trust region misses the linearized feasible set.
    if c - (2.0 * delta * s).sqrt() > 0.0 {
        return Ok(recovery());
    }
    // Case (ii).
    let dual = Dual { q, r, s, c, delta };
    if 2.0 * delta - c * c / s <= EPS * delta {
        // The feasible set touches the trust region in a single point.
        return Ok(result(x_b.scaled(-c / s), StepType::Constrained, 0.0, f64::INFINITY));
    }
    let (lambda, nu) = dual.solve();
    if !lambda.is_finite() || !nu.is_finite() {
        return Err(SolverError::NonFinite("dual solution"));
    }
    let mut direction = x_g;
    direction.axpy(-nu, &x_b);
    let direction = direction.scaled(1.0 / lambda);
    if !direction.is_finite() {
        return Err(SolverError::NonFinite("step direction"));
    }
    Ok(result(direction, StepType::Constrained, nu, lambda))
}
