//! Monte-Carlo middle-value estimator.
//!
//! The value of a partial pyramid is estimated from `K` on-policy
//! continuations as `η log((1/K) Σ exp(R_k / η))`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VarlError};
use crate::math::{log_mean_exp, mean};
use crate::mdp::{rollout, PolicyParams, SamplerConfig, TerminalReward, Trajectory, VarState};
use crate::oracle::{middle_value, SoftControlProblem};
use crate::rng::stream;

/// Cap on the number of `K`-tuples enumerated for the exhaustive expectation.
const TUPLE_BOUND: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VmrConfig {
    pub eta: f64,
    pub k_samples: usize,
    /// Feed the continuations back as suffix-training rollouts.
    pub reuse_continuations: bool,
}

impl Default for VmrConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            k_samples: 2,
            reuse_continuations: false,
        }
    }
}

impl VmrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(invalid(format!(
                "vmr eta must be positive, got {}",
                self.eta
            )));
        }
        if self.k_samples == 0 {
            return Err(invalid("vmr k_samples must be at least 1"));
        }
        Ok(())
    }
}

/// `η log((1/K) Σ exp(R_k / η))`.
///
/// The largest reward is factored out before dividing by `η`, so equal
/// rewards come back bit-exact.
pub fn vmr_from_rewards(rewards: &[f64], eta: f64) -> f64 {
    let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let scaled: Vec<f64> = rewards.iter().map(|r| (r - max) / eta).collect();
    max + eta * log_mean_exp(&scaled)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmrEstimate {
    pub estimate: f64,
    pub rewards: Vec<f64>,
    pub continuations: Vec<Trajectory>,
}

/// Samples `K` continuations of `state` under `params` and folds their
/// terminal rewards. Continuation `k` uses the stream `(seed, prefix_id, k)`.
pub fn estimate_middle_value(
    state: &VarState,
    params: &PolicyParams,
    reward: &dyn TerminalReward,
    cfg: &VmrConfig,
    sampler: &SamplerConfig,
    seed: u64,
    prefix_id: u64,
) -> Result<VmrEstimate> {
    cfg.validate()?;
    let end = params.schedule().len();
    let continuations: Vec<Trajectory> = (0..cfg.k_samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, &[prefix_id, k as u64]);
            let mut t = rollout(params, state, end, sampler, &mut rng)?;
            t.seed = Some(seed);
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let rewards = continuations
        .iter()
        .map(|t| reward.terminal_reward(&t.final_state()))
        .collect::<Result<Vec<f64>>>()?;
    let estimate = vmr_from_rewards(&rewards, cfg.eta);
    if !estimate.is_finite() {
        return Err(VarlError::NonFinite(format!(
            "vmr estimate for prefix {prefix_id}"
        )));
    }
    Ok(VmrEstimate {
        estimate,
        rewards,
        continuations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub mean_estimate: f64,
    pub std_error: f64,
    /// Oracle middle value at the probed state.
    pub exact_value: f64,
    /// `exact_value - mean_estimate`.
    pub gap: f64,
    /// `E[estimate]` over all `K`-tuples of outcomes, when small enough to
    /// enumerate.
    pub exhaustive_expectation: Option<f64>,
}

/// Terminal outcomes reachable from `state` under the reference policy, as
/// `(probability, reward)` pairs.
pub fn completion_outcomes(
    problem: &SoftControlProblem,
    split: usize,
    state: usize,
) -> Vec<(f64, f64)> {
    let lat = problem.lattice();
    let l = lat.levels();
    let below: usize = (split..l).map(|t| lat.actions(t)).product();
    let old = &problem.reference_joint().log_probs;
    (state * below..(state + 1) * below)
        .map(|c| {
            let lp: f64 = (split..l).map(|t| old[t][lat.ancestor(l, c, t + 1)]).sum();
            (lp.exp(), problem.rewards()[c])
        })
        .collect()
}

fn exhaustive_expectation(outcomes: &[(f64, f64)], k: usize, eta: f64) -> Option<f64> {
    let n = outcomes.len() as u64;
    if n.checked_pow(k as u32).is_none_or(|t| t > TUPLE_BOUND) {
        return None;
    }
    let mut idx = vec![0usize; k];
    let mut total = 0.0;
    let mut rewards = vec![0.0; k];
    loop {
        let mut p = 1.0;
        for (slot, &i) in idx.iter().enumerate() {
            p *= outcomes[i].0;
            rewards[slot] = outcomes[i].1;
        }
        if p > 0.0 {
            total += p * vmr_from_rewards(&rewards, eta);
        }
        let mut pos = 0;
        loop {
            if pos == k {
                return Some(total);
            }
            idx[pos] += 1;
            if idx[pos] < outcomes.len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// Averages `trials` independent estimates at state code `state` (with
/// `split` grids) under the reference policy and compares with the oracle.
pub fn estimator_bias_report(
    problem: &SoftControlProblem,
    split: usize,
    state: usize,
    cfg: &VmrConfig,
    trials: usize,
    seed: u64,
) -> Result<BiasReport> {
    cfg.validate()?;
    let lat = problem.lattice();
    if split > lat.levels() || state >= lat.states(split) {
        return Err(invalid(format!("no state {state} at level {split}")));
    }
    if trials == 0 {
        return Err(invalid("bias report needs at least one trial"));
    }
    let exact_value = middle_value(problem, split)?[state];
    let start = lat.state(split, state);
    let sampler = SamplerConfig::default();
    let estimates = (0..trials)
        .into_par_iter()
        .map(|i| {
            estimate_middle_value(
                &start,
                problem.reference(),
                problem,
                cfg,
                &sampler,
                seed,
                i as u64,
            )
            .map(|e| e.estimate)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean_estimate = mean(&estimates);
    let var = estimates
        .iter()
        .map(|e| (e - mean_estimate).powi(2))
        .sum::<f64>()
        / (trials.max(2) - 1) as f64;
    let outcomes = completion_outcomes(problem, split, state);
    Ok(BiasReport {
        mean_estimate,
        std_error: (var / trials as f64).sqrt(),
        exact_value,
        gap: exact_value - mean_estimate,
        exhaustive_expectation: exhaustive_expectation(&outcomes, cfg.k_samples, cfg.eta),
    })
}
