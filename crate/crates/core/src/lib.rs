//! Reinforcement-learning laboratory for next-scale (coarse-to-fine)
//! autoregressive token pyramids.
//!
//! The crate covers the generation MDP and its factorized policies, a
//! brute-force soft-optimality oracle, a Monte-Carlo middle-value
//! estimator, an OCR-style text reward, reward-mask propagation across
//! scales, a group-relative policy-gradient trainer and an experiment
//! harness.

pub mod error;
pub mod grpo;
pub mod harness;
pub mod maskprop;
pub mod math;
pub mod mdp;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod textreward;
pub mod vmr;

pub use error::{Result, VarlError};
