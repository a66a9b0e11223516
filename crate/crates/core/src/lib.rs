//! Trust-region policy optimization with exact tabular analysis tools.
//!
//! * [`mdp`], [`theory`]: exact evaluation of tabular MDPs and the policy
//!   improvement lower bounds, including a monotone MM policy iteration.
//! * [`policy`]: parameterized stochastic policies with analytic Fisher products.
//! * [`env`], [`sampling`]: environments and Monte-Carlo surrogate estimates.
//! * [`solver`], [`baselines`]: the constrained update and comparison methods.
//! * [`harness`]: experiment runs, logs, checkpoints and plots.

pub mod baselines;
pub mod env;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod policy;
pub mod sampling;
pub mod solver;
pub mod theory;

pub use error::{Error, Result};
