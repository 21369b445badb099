//! Trust-region policy optimization with a conditional-value-at-risk constraint
//! on the discounted cost sum.
//!
//! The crate is organised around the pieces of the training stack:
//!
//! * [`env`]: a seedable 2D hazard-navigation task and a tabular-MDP environment.
//! * [`diffnet`]: a small reverse-mode autodiff tape, MLPs over flat parameter
//!   vectors, the diagonal Gaussian policy, KL divergence and Fisher-vector products.
//! * [`advantage`]: GAE for reward, cost and the cost-square function.
//! * [`cvar`]: normal-distribution utilities, the Gaussian CVaR closed form and the
//!   differentiable CVaR surrogate used as the policy constraint.
//! * [`tabular`]: exact linear-algebra evaluation of small MDPs and numeric checks of
//!   the CVaR/cost-square bounds.
//! * [`solver`]: conjugate gradient, the LQCLP trust-region step and line search.
//! * [`trainer`]: rollout collection, policy and value updates, epoch reports.
//! * [`config`]: the flat `section.key = value` experiment file.

pub mod advantage;
pub mod config;
pub mod cvar;
pub mod diffnet;
pub mod env;
pub mod error;
pub mod solver;
pub mod tabular;
pub mod trainer;

pub use error::{Error, Result};
