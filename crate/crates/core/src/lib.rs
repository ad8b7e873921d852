//! Exact probability-of-success dynamics for GRPO-style policy iteration
//! with binary verifiable rewards.
//!
//! The crate works over finite prompt/outcome worlds. Every policy update is
//! available both as a closed-form exponential tilt of an anchor policy and as
//! a scalar recurrence on the probability of success (PoS); the [`oracle`]
//! module provides independent numerical machinery to certify the two agree.
//!
//! Module map:
//!
//! - [`world`]: worlds, conditional policies, success/failure splits, logit/sigmoid.
//! - [`calibration`]: advantage weights (whitened, stabilized mean+variance, mean-only).
//! - [`dynamics`]: scalar PoS maps, trajectories, fixed points and stability.
//! - [`policy_update`]: Gibbs/mirror/two-KL policy recursions and Rényi corrections.
//! - [`oracle`]: objective evaluation, clipped surrogate, simplex maximizer, group estimates.
//! - [`trainer`]: tabular softmax realization of the iterative training loop.
//! - [`verify`]: end-to-end verification suites shared by the CLI and tests.
//! - [`cli`]: the experiment runner behind the `grpo-dynamics` binary.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod cli;

pub mod dynamics;
pub mod oracle;
mod error;

pub mod par;
pub mod policy_update;
pub mod trainer;
pub mod verify;


pub mod world;

pub use error::{Error, Result, Side};
