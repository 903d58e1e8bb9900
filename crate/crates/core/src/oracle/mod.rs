//! Exact soft-optimality on enumerable problems.
//!
//! Every state of a small pyramid is enumerated level by level: level `t`
//! holds the `V^(tokens before t)` states with `t` grids, indexed by their
//! canonical code, and each of them has `V^(sites_t)` joint actions. All
//! expectations are carried in log space.

mod projection;
mod solve;

pub use projection::{
    constrained_optimum, marginal_policy, product_of_marginals, project_from, reverse_kl_project,
    ConstrainedOptimum, JointDist, Projection, ProjectionStart, LOG_FLOOR,
};
pub use solve::{middle_value, solve_soft, two_stage_check, InvarianceReport, SoftSolution};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VarlError};
use crate::math::{log_sum_exp, softmax};
use crate::mdp::{grid_from_code, PolicyParams, Token, TokenGrid, VarState};
use crate::schedule::ScaleSchedule;

/// Largest terminal-state count the oracle will enumerate.
pub const ENUMERATION_BOUND: u64 = 1 << 22;

/// State/action counts per level of an enumerable pyramid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lattice {
    schedule: ScaleSchedule,
    vocab: usize,
    /// `states[t]` for levels `0..=L`.
    states: Vec<usize>,
    /// `actions[t]` for levels `0..L`.
    actions: Vec<usize>,
}

impl Lattice {
    pub fn new(schedule: &ScaleSchedule, vocab: usize) -> Result<Self> {
        let total = schedule.total_tokens();
        let terminal = (vocab as u64)
            .checked_pow(total as u32)
            .filter(|&n| n <= ENUMERATION_BOUND);
        if terminal.is_none() {
            return Err(VarlError::TooLarge(format!(
                "{vocab}^{total} terminal states exceed the enumeration bound {ENUMERATION_BOUND}"
            )));
        }
        let states = (0..=schedule.len())
            .map(|t| vocab.pow(schedule.tokens_before(t) as u32))
            .collect();
        let actions = (0..schedule.len())
            .map(|t| vocab.pow(schedule.sites(t) as u32))
            .collect();
        Ok(Self {
            schedule: schedule.clone(),
            vocab,
            states,
            actions,
        })
    }

    pub fn levels(&self) -> usize {
        self.schedule.len()
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn states(&self, level: usize) -> usize {
        self.states[level]
    }

    pub fn actions(&self, level: usize) -> usize {
        self.actions[level]
    }

    pub fn terminal_states(&self) -> usize {
        self.states[self.levels()]
    }

    /// Child code reached from `state` at `level` by joint action `action`.
    pub fn child(&self, level: usize, state: usize, action: usize) -> usize {
        state * self.actions[level] + action
    }

    /// Ancestor code at `level` of a state code at `from`.
    pub fn ancestor(&self, from: usize, code: usize, level: usize) -> usize {
        let span: usize = (level..from).map(|t| self.actions[t]).product();
        code / span
    }

    /// Joint action taken at `level` on the path to `code` at level `from`.
    pub fn action_on_path(&self, from: usize, code: usize, level: usize) -> usize {
        self.ancestor(from, code, level + 1) % self.actions[level]
    }

    /// Materializes the state with a given code.
    pub fn state(&self, level: usize, code: usize) -> VarState {
        let mut grids = Vec::with_capacity(level);
        for t in 0..level {
            let a = self.action_on_path(level, code, t);
            grids.push(grid_from_code(self.schedule.shape(t), a as u64, self.vocab));
        }
        VarState::from_grids(&self.schedule, grids).expect("lattice states follow the schedule")
    }

    /// Per-site tokens of joint action `action` at `level`.
    pub fn action_tokens(&self, level: usize, action: usize) -> Vec<Token> {
        grid_from_code(self.schedule.shape(level), action as u64, self.vocab)
            .tokens()
            .to_vec()
    }

    pub fn action_grid(&self, level: usize, action: usize) -> TokenGrid {
        grid_from_code(self.schedule.shape(level), action as u64, self.vocab)
    }
}

/// Explicit conditional action distributions, stored as log-probabilities
/// `[state][action]` per level. Not restricted to the factorized family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPolicy {
    pub log_probs: Vec<Vec<f64>>,
}

impl JointPolicy {
    /// Enumerates a factorized policy into joint tables.
    pub fn from_params(lattice: &Lattice, params: &PolicyParams) -> Result<Self> {
        if params.schedule() != lattice.schedule() || params.vocab() != lattice.vocab() {
            return Err(VarlError::ShapeMismatch(
                "policy does not match the problem lattice".into(),
            ));
        }
        let v = lattice.vocab();
        let mut log_probs = Vec::with_capacity(lattice.levels());
        for level in 0..lattice.levels() {
            let na = lattice.actions(level);
            let sites = lattice.schedule().sites(level);
            let rows: Vec<Vec<f64>> = (0..lattice.states(level))
                .into_par_iter()
                .map(|s| {
                    let lp = params.step_log_probs(&lattice.state(level, s))?;
                    Ok((0..na)
                        .map(|a| {
                            let mut code = a;
                            let mut total = 0.0;
                            for site in (0..sites).rev() {
                                total += lp[site * v + code % v];
                                code /= v;
                            }
                            total
                        })
                        .collect::<Vec<f64>>())
                })
                .collect::<Result<_>>()?;
            log_probs.push(rows.concat());
        }
        Ok(Self { log_probs })
    }

    /// Builds a policy from per-state logits over joint actions.
    pub fn from_logits(
        lattice: &Lattice,
        mut logits: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Self {
        let log_probs = (0..lattice.levels())
            .map(|level| {
                (0..lattice.states(level))
                    .flat_map(|s| {
                        let z = logits(level, s);
                        assert_eq!(z.len(), lattice.actions(level));
                        softmax(&z).into_iter().map(f64::ln).collect::<Vec<_>>()
                    })
                    .collect()
            })
            .collect();
        Self { log_probs }
    }

    pub fn row(&self, lattice: &Lattice, level: usize, state: usize) -> &[f64] {
        let na = lattice.actions(level);
        &self.log_probs[level][state * na..(state + 1) * na]
    }

    /// Probabilities of one state's joint actions.
    pub fn probs(&self, lattice: &Lattice, level: usize, state: usize) -> Vec<f64> {
        self.row(lattice, level, state)
            .iter()
            .map(|x| x.exp())
            .collect()
    }

    /// Concatenates `self` on levels `< split` with `suffix` on the rest.
    pub fn concat(&self, suffix: &JointPolicy, split: usize) -> JointPolicy {
        let log_probs = self.log_probs[..split]
            .iter()
            .chain(&suffix.log_probs[split..])
            .cloned()
            .collect();
        JointPolicy { log_probs }
    }
}

/// An enumerable KL-regularized control problem with terminal reward.
#[derive(Debug, Clone)]
pub struct SoftControlProblem {
    lattice: Lattice,
    reference: PolicyParams,
    reference_joint: JointPolicy,
    rewards: Vec<f64>,
    eta: f64,
}

impl SoftControlProblem {
    /// `rewards[c]` is the reward of the terminal state with code `c`.
    pub fn new(reference: PolicyParams, rewards: Vec<f64>, eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(VarlError::InvalidConfig(format!(
                "temperature must be positive, got {eta}"
            )));
        }
        let lattice = Lattice::new(reference.schedule(), reference.vocab())?;
        if rewards.len() != lattice.terminal_states() {
            return Err(VarlError::ShapeMismatch(format!(
                "{} rewards for {} terminal states",
                rewards.len(),
                lattice.terminal_states()
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(VarlError::NonFinite("terminal reward".into()));
        }
        let reference_joint = JointPolicy::from_params(&lattice, &reference)?;
        Ok(Self {
            lattice,
            reference,
            reference_joint,
            rewards,
            eta,
        })
    }

    pub fn from_fn(
        reference: PolicyParams,
        eta: f64,
        reward: impl Fn(&VarState) -> f64,
    ) -> Result<Self> {
        let lattice = Lattice::new(reference.schedule(), reference.vocab())?;
        let l = lattice.levels();
        let rewards = (0..lattice.terminal_states())
            .map(|c| reward(&lattice.state(l, c)))
            .collect();
        Self::new(reference, rewards, eta)
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn reference(&self) -> &PolicyParams {
        &self.reference
    }

    pub fn reference_joint(&self) -> &JointPolicy {
        &self.reference_joint
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn reward_of(&self, state: &VarState) -> Result<f64> {
        let l = self.lattice.levels();
        if state.step() != l {
            return Err(VarlError::ShapeMismatch(
                "reward needs a terminal state".into(),
            ));
        }
        let code = state
            .code(self.lattice.vocab())
            .ok_or(VarlError::UnknownState {
                step: l,
                code: u64::MAX,
            })?;
        self.rewards
            .get(code as usize)
            .copied()
            .ok_or(VarlError::UnknownState { step: l, code })
    }

    /// `J(π) = E_π[R] - η KL(p_π || p_old)` by backward recursion.
    pub fn objective(&self, policy: &JointPolicy) -> f64 {
        let lat = &self.lattice;
        let mut w = self.rewards.clone();
        for level in (0..lat.levels()).rev() {
            let na = lat.actions(level);
            let pol = &policy.log_probs[level];
            let old = &self.reference_joint.log_probs[level];
            w = (0..lat.states(level))
                .map(|s| {
                    (0..na)
                        .map(|a| {
                            let i = s * na + a;
                            let lp = pol[i];
                            if lp == f64::NEG_INFINITY {
                                0.0
                            } else {
                                lp.exp() * (w[lat.child(level, s, a)] - self.eta * (lp - old[i]))
                            }
                        })
                        .sum()
                })
                .collect();
        }
        w[0]
    }

    /// `log p_π(τ)` for every trajectory, indexed by terminal code.
    pub fn trajectory_log_probs(&self, policy: &JointPolicy) -> Vec<f64> {
        let lat = &self.lattice;
        let mut acc = vec![0.0];
        for level in 0..lat.levels() {
            let na = lat.actions(level);
            let pol = &policy.log_probs[level];
            acc = (0..lat.states(level + 1))
                .map(|c| acc[c / na] + pol[c])
                .collect();
        }
        acc
    }

    /// `η log Z` with `Z = E_{p_old}[exp(R/η)]`, by direct enumeration of
    /// trajectories.
    pub fn log_partition(&self) -> f64 {
        let lp = self.trajectory_log_probs(&self.reference_joint);
        let terms: Vec<f64> = lp
            .iter()
            .zip(&self.rewards)
            .map(|(l, r)| l + r / self.eta)
            .collect();
        self.eta * log_sum_exp(&terms)
    }

    /// `log p*(τ) = log p_old(τ) + R/η - log Z`, by enumeration.
    pub fn optimal_trajectory_log_probs(&self) -> Vec<f64> {
        let log_z = self.log_partition() / self.eta;
        self.trajectory_log_probs(&self.reference_joint)
            .iter()
            .zip(&self.rewards)
            .map(|(l, r)| l + r / self.eta - log_z)
            .collect()
    }

    /// Sum over time of the expected per-state KL(π(.|s) || other(.|s))
    /// under π's state visitation.
    pub fn chained_state_kl(&self, policy: &JointPolicy, other: &JointPolicy) -> f64 {
        let lat = &self.lattice;
        let mut visit = vec![1.0];
        let mut total = 0.0;
        for level in 0..lat.levels() {
            let na = lat.actions(level);
            let pol = &policy.log_probs[level];
            let oth = &other.log_probs[level];
            let mut next = vec![0.0; lat.states(level + 1)];
            for (s, &d) in visit.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let mut kl = 0.0;
                for a in 0..na {
                    let i = s * na + a;
                    let p = pol[i].exp();
                    if p > 0.0 {
                        kl += p * (pol[i] - oth[i]);
                    }
                    next[lat.child(level, s, a)] = d * p;
                }
                total += d * kl;
            }
            visit = next;
        }
        total
    }
}

impl crate::mdp::TerminalReward for SoftControlProblem {
    fn terminal_reward(&self, state: &VarState) -> Result<f64> {
        self.reward_of(state)
    }
}

/// `KL(p || q)` between two distributions given as log-probabilities.
pub fn kl_from_logs(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(&lp, &lq)| {
            if lp == f64::NEG_INFINITY {
                0.0
            } else {
                lp.exp() * (lp - lq)
            }
        })
        .sum()
}
