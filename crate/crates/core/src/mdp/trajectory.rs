use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample_action, PolicyParams, SamplerConfig, TokenGrid, VarState};
use crate::error::{Result, VarlError};
use crate::schedule::ScaleSchedule;

const TRAJECTORY_VERSION: u32 = 1;

/// A rollout segment. `grids` holds the whole pyramid up to the last
/// generated step; grids before `start` are conditioning that this
/// trajectory did not sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(default = "version")]
    pub version: u32,
    pub seed: Option<u64>,
    pub start: usize,
    pub grids: Vec<TokenGrid>,
    /// Per action step, per site log-probabilities under the sampling
    /// policy (untruncated softmax).
    pub sample_log_probs: Vec<Vec<f64>>,
    /// Mean absolute truncation gap recorded at sampling time.
    #[serde(default)]
    pub truncation_gap: f64,
}

fn version() -> u32 {
    TRAJECTORY_VERSION
}

impl Trajectory {
    pub fn end(&self) -> usize {
        self.grids.len()
    }

    pub fn action_steps(&self) -> Range<usize> {
        self.start..self.end()
    }

    /// State before step `step` was generated.
    pub fn state_at(&self, step: usize) -> VarState {
        VarState {
            grids: self.grids[..step].to_vec(),
        }
    }

    pub fn final_state(&self) -> VarState {
        VarState {
            grids: self.grids.clone(),
        }
    }

    pub fn action(&self, step: usize) -> &TokenGrid {
        &self.grids[step]
    }

    pub fn sample_log_prob(&self) -> f64 {
        self.sample_log_probs.iter().flatten().sum()
    }

    pub fn check(&self, schedule: &ScaleSchedule) -> Result<()> {
        VarState::from_grids(schedule, self.grids.clone())?;
        if self.start > self.end() || self.sample_log_probs.len() != self.end() - self.start {
            return Err(VarlError::ShapeMismatch(format!(
                "trajectory [{}, {}) carries {} log-prob rows",
                self.start,
                self.end(),
                self.sample_log_probs.len()
            )));
        }
        for (k, row) in self.sample_log_probs.iter().enumerate() {
            if row.len() != schedule.sites(self.start + k) {
                return Err(VarlError::ShapeMismatch(format!(
                    "log-prob row {k} has {} sites",
                    row.len()
                )));
            }
        }
        Ok(())
    }
}

/// Samples from `from` until `until` grids exist.
pub fn rollout(
    params: &PolicyParams,
    from: &VarState,
    until: usize,
    sampler: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let schedule = params.schedule();
    if until > schedule.len() || until < from.step() {
        return Err(VarlError::ShapeMismatch(format!(
            "cannot roll out from step {} to {until}",
            from.step()
        )));
    }
    let start = from.step();
    let mut state = from.clone();
    let mut sample_log_probs = Vec::with_capacity(until - start);
    let mut gap = 0.0;
    while state.step() < until {
        let a = sample_action(params, &state, sampler, rng)?;
        gap += a.truncation_gap();
        sample_log_probs.push(a.log_probs);
        state.push(schedule, a.grid)?;
    }
    let n = (until - start).max(1) as f64;
    Ok(Trajectory {
        version: TRAJECTORY_VERSION,
        seed: None,
        start,
        grids: state.grids,
        sample_log_probs,
        truncation_gap: gap / n,
    })
}

/// `Σ_t Σ_site log π(token | s_t)` over the trajectory's action steps.
pub fn trajectory_logprob(params: &PolicyParams, traj: &Trajectory) -> Result<f64> {
    traj.check(params.schedule())?;
    traj.action_steps()
        .map(|t| params.action_log_prob(&traj.state_at(t), traj.action(t)))
        .sum()
}
