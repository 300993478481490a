//! A desk-scale reinforcement-learning laboratory built around exact
//! tabular ground truth.
//!
//! The crate has three layers:
//!
//! - [`mdp`] and [`oracle`]: dense finite MDPs, seeded rollouts, and exact
//!   policy evaluation / visitation / value iteration by linear solve.
//! - [`estimators`] and [`nets`]: clipped importance-sampled value targets
//!   and advantages, plus a small actor-critic with analytic gradients.
//! - [`training`], [`diagnostics`], [`verify`], [`config`]: the
//!   stability-gated PPO loop, numerical bound checks for every identity
//!   and inequality the method relies on, and runnable verification
//!   suites behind declarative run configs.

pub mod config;
pub mod diagnostics;
pub mod estimators;
pub mod mdp;
pub mod nets;
pub mod oracle;
pub mod training;
pub mod verify;
