//! Group-relative policy optimization over token pyramids, with optional
//! prefix/suffix alternation driven by middle-value estimates.

mod loss;

pub use loss::{group_advantages, surrogate_loss, SurrogateOutput};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VarlError};
use crate::maskprop::{gate_weights, propagate, Mask};
use crate::math::mean;
use crate::mdp::{
    rollout, ParamBlocks, PolicyMode, PolicyParams, SamplerConfig, TerminalReward, Trajectory,
    VarState,
};
use crate::rng::{derive_seed, stream};
use crate::schedule::{PanwConfig, ScaleSchedule};
use crate::vmr::{estimate_middle_value, VmrConfig};

/// What the trainer optimizes against.
pub trait Task: Send + Sync {
    fn schedule(&self) -> &ScaleSchedule;
    fn vocab(&self) -> usize;
    fn reward(&self, terminal: &VarState) -> Result<f64>;
    /// Finest-grid sites that determine the reward, if the task defines them.
    fn relevance(&self, _terminal: &VarState) -> Result<Option<Mask>> {
        Ok(None)
    }
}

/// A task given by a schedule, a vocabulary and a reward closure.
pub struct FnTask<F> {
    schedule: ScaleSchedule,
    vocab: usize,
    reward: F,
}

impl<F> FnTask<F>
where
    F: Fn(&VarState) -> f64 + Send + Sync,
{
    pub fn new(schedule: ScaleSchedule, vocab: usize, reward: F) -> Self {
        Self {
            schedule,
            vocab,
            reward,
        }
    }
}

impl<F> Task for FnTask<F>
where
    F: Fn(&VarState) -> f64 + Send + Sync,
{
    fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn reward(&self, terminal: &VarState) -> Result<f64> {
        Ok((self.reward)(terminal))
    }
}

struct TaskReward<'a>(&'a dyn Task);

impl TerminalReward for TaskReward<'_> {
    fn terminal_reward(&self, state: &VarState) -> Result<f64> {
        self.0.reward(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Steps before the split, rewarded by the middle value.
    Prefix,
    /// Steps from the split on, from a shared prefix state.
    Suffix,
    /// All steps with the terminal reward.
    Full,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Prefix => "prefix",
            Phase::Suffix => "suffix",
            Phase::Full => "full",
        })
    }
}

impl FromStr for Phase {
    type Err = VarlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix" => Ok(Phase::Prefix),
            "suffix" => Ok(Phase::Suffix),
            "full" => Ok(Phase::Full),
            other => Err(invalid(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Single phase over all steps with the terminal reward.
    Vanilla,
    /// Prefix/suffix alternation.
    Vmr,
}

impl FromStr for TrainMode {
    type Err = VarlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(TrainMode::Vanilla),
            "vmr" => Ok(TrainMode::Vmr),
            other => Err(invalid(format!("unknown mode {other:?}"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Vanilla => "vanilla",
            TrainMode::Vmr => "vmr",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alternation {
    /// Interleave: `prefix_per_suffix` prefix updates, then one suffix update.
    Fine,
    /// All prefix updates first, then all suffix updates, in the same ratio.
    Coarse,
}

impl FromStr for Alternation {
    type Err = VarlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(Alternation::Fine),
            "coarse" => Ok(Alternation::Coarse),
            other => Err(invalid(format!("unknown alternation {other:?}"))),
        }
    }
}

impl fmt::Display for Alternation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alternation::Fine => "fine",
            Alternation::Coarse => "coarse",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    Constant,
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPropConfig {
    pub enabled: bool,
    /// Weight multiplier for sites outside the mask.
    pub off_factor: f64,
}

impl Default for MaskPropConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            off_factor: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyInit {
    pub mode: PolicyMode,
    /// Uniform logit noise amplitude at initialization; 0 gives the uniform
    /// policy.
    pub scale: f64,
}

impl Default for PolicyInit {
    fn default() -> Self {
        Self {
            mode: PolicyMode::Contextual,
            scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: TrainMode,
    pub group_size: usize,
    /// Groups per update.
    pub batch_size: usize,
    pub updates: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    /// Number of grids in the middle state; prefix steps are `0..split`.
    pub split: usize,
    pub prefix_per_suffix: usize,
    pub alternation: Alternation,
    pub panw: PanwConfig,
    /// Apply the step weights to the KL penalty as well.
    pub panw_on_kl: bool,
    pub vmr: VmrConfig,
    pub sampler: SamplerConfig,
    pub mask_prop: MaskPropConfig,
    pub lr: f64,
    pub lr_decay: LrDecay,
    pub lr_warmup: usize,
    pub momentum: f64,
    pub advantage_std_floor: f64,
    /// Divide advantages by the group standard deviation.
    pub normalize_advantages: bool,
    /// Gradient steps per collected batch.
    pub inner_steps: usize,
    /// Keep the initial policy as the KL reference instead of refreshing it
    /// every update.
    pub fixed_reference: bool,
    pub policy: PolicyInit,
    pub checkpoint_every: usize,
    pub keep_checkpoints: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Vmr,
            group_size: 16,
            batch_size: 16,
            updates: 600,
            clip_eps: 0.2,
            kl_coef: 0.01,
            split: 2,
            prefix_per_suffix: 3,
            alternation: Alternation::Fine,
            panw: PanwConfig::default(),
            panw_on_kl: true,
            vmr: VmrConfig::default(),
            sampler: SamplerConfig::default(),
            mask_prop: MaskPropConfig::default(),
            lr: 0.05,
            lr_decay: LrDecay::Constant,
            lr_warmup: 0,
            momentum: 0.9,
            advantage_std_floor: 1e-6,
            normalize_advantages: true,
            inner_steps: 1,
            fixed_reference: false,
            policy: PolicyInit::default(),
            checkpoint_every: 50,
            keep_checkpoints: 3,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self, schedule: &ScaleSchedule) -> Result<()> {
        if self.group_size < 2 {
            return Err(invalid("group_size must be at least 2"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(invalid(format!(
                "clip_eps must lie in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return Err(invalid("kl_coef must be finite and nonnegative"));
        }
        if self.prefix_per_suffix == 0 {
            return Err(invalid("prefix_per_suffix must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if self.advantage_std_floor.is_nan() || self.advantage_std_floor <= 0.0 {
            return Err(invalid("advantage_std_floor must be positive"));
        }
        if self.inner_steps == 0 {
            return Err(invalid("inner_steps must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.mask_prop.off_factor) {
            return Err(invalid("mask_prop.off_factor must lie in [0, 1]"));
        }
        if self.mode == TrainMode::Vmr && !(1..schedule.len()).contains(&self.split) {
            return Err(invalid(format!(
                "split must leave at least one prefix and one suffix step (1..{}), got {}",
                schedule.len(),
                self.split
            )));
        }
        self.panw.validate()?;
        self.vmr.validate()?;
        Ok(())
    }

    /// Phase trained at a given update.
    pub fn phase_at(&self, update: usize) -> Phase {
        if self.mode == TrainMode::Vanilla {
            return Phase::Full;
        }
        let r = self.prefix_per_suffix;
        match self.alternation {
            Alternation::Fine => {
                if update % (r + 1) < r {
                    Phase::Prefix
                } else {
                    Phase::Suffix
                }
            }
            Alternation::Coarse => {
                if update < self.updates * r / (r + 1) {
                    Phase::Prefix
                } else {
                    Phase::Suffix
                }
            }
        }
    }

    /// Learning rate at a given update.
    pub fn lr_at(&self, update: usize) -> f64 {
        let warm = if self.lr_warmup > 0 && update < self.lr_warmup {
            (update + 1) as f64 / self.lr_warmup as f64
        } else {
            1.0
        };
        let frac = if self.updates > 0 {
            update as f64 / self.updates as f64
        } else {
            0.0
        };
        let decay = match self.lr_decay {
            LrDecay::Constant => 1.0,
            LrDecay::Linear => 1.0 - frac,
            LrDecay::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
        };
        self.lr * warm * decay
    }
}

/// Trajectories sampled from one conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub conditioning: u64,
    pub phase: Phase,
    pub trajectories: Vec<Trajectory>,
    /// Terminal reward (suffix/full) or middle-value estimate (prefix).
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Terminal rewards of every full rollout behind this group, including
    /// estimator continuations.
    pub terminal_rewards: Vec<f64>,
    /// Middle-value estimates per member (prefix phase).
    pub vmr: Vec<Option<f64>>,
    /// Per trajectory, per step, per site mask gates.
    pub gates: Vec<Option<Vec<Vec<f64>>>>,
}

/// Middle-value source for prefix updates.
#[derive(Clone)]
pub enum PrefixReward {
    /// Monte-Carlo estimate from on-policy continuations.
    Estimate,
    /// A known value function of the middle state.
    Exact(Arc<dyn Fn(&VarState) -> f64 + Send + Sync>),
}

impl fmt::Debug for PrefixReward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrefixReward::Estimate => f.write_str("Estimate"),
            PrefixReward::Exact(_) => f.write_str("Exact(..)"),
        }
    }
}

const SHARED_PREFIX: u64 = u64::MAX;

fn phase_tag(phase: Phase) -> u64 {
    match phase {
        Phase::Prefix => 1,
        Phase::Suffix => 2,
        Phase::Full => 3,
    }
}

fn member_gates(
    task: &dyn Task,
    cfg: &TrainerConfig,
    traj: &Trajectory,
) -> Result<Option<Vec<Vec<f64>>>> {
    let schedule = task.schedule();
    if !cfg.mask_prop.enabled || traj.end() != schedule.len() {
        return Ok(None);
    }
    let Some(mask) = task.relevance(&traj.final_state())? else {
        return Ok(None);
    };
    let pyramid = propagate(schedule, &mask)?;
    let ones: Vec<Vec<f64>> = (0..schedule.len())
        .map(|t| vec![1.0; schedule.sites(t)])
        .collect();
    gate_weights(&pyramid, &ones, cfg.mask_prop.off_factor).map(Some)
}

/// Samples one group for `phase` from the snapshot `params`. Streams derive
/// from `(seed, update, phase, group)`.
pub fn collect_group(
    task: &dyn Task,
    params: &PolicyParams,
    phase: Phase,
    cfg: &TrainerConfig,
    prefix_reward: &PrefixReward,
    update: usize,
    group: usize,
) -> Result<RolloutGroup> {
    let l = task.schedule().len();
    let base = [update as u64, phase_tag(phase), group as u64];
    let seed = cfg.seed;
    let member_rng = |i: usize| stream(seed, &[base[0], base[1], base[2], i as u64]);
    let g = cfg.group_size;
    let (trajectories, rewards, terminal_rewards, vmr): (
        Vec<Trajectory>,
        Vec<f64>,
        Vec<f64>,
        Vec<Option<f64>>,
    ) = match phase {
        Phase::Full | Phase::Suffix => {
            let start = if phase == Phase::Suffix {
                let mut rng = member_rng(SHARED_PREFIX as usize);
                rollout(params, &VarState::root(), cfg.split, &cfg.sampler, &mut rng)?.final_state()
            } else {
                VarState::root()
            };
            let trajs: Vec<Trajectory> = (0..g)
                .into_par_iter()
                .map(|i| {
                    let mut t = rollout(params, &start, l, &cfg.sampler, &mut member_rng(i))?;
                    t.seed = Some(seed);
                    Ok(t)
                })
                .collect::<Result<_>>()?;
            let rewards = trajs
                .iter()
                .map(|t| task.reward(&t.final_state()))
                .collect::<Result<Vec<_>>>()?;
            let n = trajs.len();
            (trajs, rewards.clone(), rewards, vec![None; n])
        }
        Phase::Prefix => {
            let vmr_seed = derive_seed(seed, &[base[0], base[1], base[2]]);
            let members: Vec<(Trajectory, f64, Vec<f64>)> = (0..g)
                .into_par_iter()
                .map(|i| {
                    let mut t = rollout(
                        params,
                        &VarState::root(),
                        cfg.split,
                        &cfg.sampler,
                        &mut member_rng(i),
                    )?;
                    t.seed = Some(seed);
                    let s_m = t.final_state();
                    match prefix_reward {
                        PrefixReward::Estimate => {
                            let est = estimate_middle_value(
                                &s_m,
                                params,
                                &TaskReward(task),
                                &cfg.vmr,
                                &cfg.sampler,
                                vmr_seed,
                                i as u64,
                            )?;
                            Ok((t, est.estimate, est.rewards))
                        }
                        PrefixReward::Exact(f) => {
                            let v = f(&s_m);
                            if !v.is_finite() {
                                return Err(VarlError::NonFinite("exact middle value".into()));
                            }
                            Ok((t, v, Vec::new()))
                        }
                    }
                })
                .collect::<Result<_>>()?;
            let mut trajs = Vec::with_capacity(g);
            let mut rewards = Vec::with_capacity(g);
            let mut terminal = Vec::new();
            for (t, r, cont) in members {
                trajs.push(t);
                rewards.push(r);
                terminal.extend(cont);
            }
            let vmr = rewards.iter().map(|&r| Some(r)).collect();
            (trajs, rewards, terminal, vmr)
        }
    };
    let advantages = if cfg.normalize_advantages {
        group_advantages(&rewards, cfg.advantage_std_floor)
    } else {
        let m = mean(&rewards);
        rewards.iter().map(|r| r - m).collect()
    };
    let gates = trajectories
        .iter()
        .map(|t| member_gates(task, cfg, t))
        .collect::<Result<_>>()?;
    Ok(RolloutGroup {
        conditioning: group as u64,
        phase,
        trajectories,
        rewards,
        advantages,
        terminal_rewards,
        vmr,
        gates,
    })
}

/// One estimator call logged during a prefix update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmrRecord {
    pub update: usize,
    pub prefix_id: String,
    pub k: usize,
    pub eta: f64,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub update: usize,
    pub phase: Phase,
    pub mean_reward: f64,
    pub mean_vmr: Option<f64>,
    pub loss: f64,
    pub kl: f64,
    pub clipped_frac: f64,
    pub grad_norm: f64,
    pub step_grad_norms: Vec<f64>,
    pub truncation_gap: f64,
    #[serde(skip)]
    pub vmr_records: Vec<VmrRecord>,
}

/// Owns the policy, optimizer state and reference of one training run.
pub struct Trainer<'a> {
    task: &'a dyn Task,
    cfg: TrainerConfig,
    params: PolicyParams,
    reference: PolicyParams,
    velocity: ParamBlocks,
    update: usize,
    prefix_reward: PrefixReward,
}

impl<'a> Trainer<'a> {
    pub fn new(task: &'a dyn Task, cfg: TrainerConfig) -> Result<Self> {
        cfg.validate(task.schedule())?;
        let params = if cfg.policy.scale > 0.0 {
            let mut rng = stream(cfg.seed, &[u64::MAX, 0]);
            PolicyParams::random(
                task.schedule().clone(),
                task.vocab(),
                cfg.policy.mode,
                cfg.policy.scale,
                &mut rng,
            )?
        } else {
            PolicyParams::new(task.schedule().clone(), task.vocab(), cfg.policy.mode)?
        };
        Self::with_params(task, cfg, params)
    }

    pub fn with_params(
        task: &'a dyn Task,
        cfg: TrainerConfig,
        params: PolicyParams,
    ) -> Result<Self> {
        cfg.validate(task.schedule())?;
        if params.schedule() != task.schedule() || params.vocab() != task.vocab() {
            return Err(VarlError::ShapeMismatch(
                "policy does not match the task".into(),
            ));
        }
        Ok(Self {
            task,
            reference: params.clone(),
            params,
            cfg,
            velocity: ParamBlocks::new(),
            update: 0,
            prefix_reward: PrefixReward::Estimate,
        })
    }

    pub fn set_prefix_reward(&mut self, source: PrefixReward) {
        self.prefix_reward = source;
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn updates_done(&self) -> usize {
        self.update
    }

    /// Runs the phase scheduled for the next update.
    pub fn step(&mut self) -> Result<UpdateReport> {
        let phase = self.cfg.phase_at(self.update);
        self.update_phase(phase)
    }

    /// Collects a batch for `phase` and applies the configured number of
    /// gradient steps.
    pub fn update_phase(&mut self, phase: Phase) -> Result<UpdateReport> {
        if phase != Phase::Full && !(1..=self.task.schedule().len()).contains(&self.cfg.split) {
            return Err(invalid(format!(
                "phase {phase} needs a split inside the schedule"
            )));
        }
        let update = self.update;
        if !self.cfg.fixed_reference {
            self.reference = self.params.clone();
        }
        let snapshot = self.params.clone();
        let groups: Vec<RolloutGroup> = (0..self.cfg.batch_size)
            .map(|b| {
                collect_group(
                    self.task,
                    &snapshot,
                    phase,
                    &self.cfg,
                    &self.prefix_reward,
                    update,
                    b,
                )
            })
            .collect::<Result<_>>()?;
        let lr = self.cfg.lr_at(update);
        let mut first: Option<SurrogateOutput> = None;
        for _ in 0..self.cfg.inner_steps {
            let out = surrogate_loss(&groups, &self.params, &self.reference, &self.cfg)?;
            self.velocity.scale(self.cfg.momentum);
            self.velocity.add_scaled(&out.grad, 1.0);
            self.params.apply(&self.velocity, -lr);
            if !self.params.blocks().all_finite() {
                return Err(VarlError::NonFinite(format!(
                    "parameters after update {update}"
                )));
            }
            first.get_or_insert(out);
        }
        let out = first.expect("at least one inner step");
        self.update += 1;

        let terminal: Vec<f64> = groups
            .iter()
            .flat_map(|g| g.terminal_rewards.iter().copied())
            .collect();
        let vmr: Vec<f64> = groups
            .iter()
            .flat_map(|g| g.vmr.iter().flatten().copied())
            .collect();
        let gaps: Vec<f64> = groups
            .iter()
            .flat_map(|g| g.trajectories.iter().map(|t| t.truncation_gap))
            .collect();
        let (k, eta) = (self.cfg.vmr.k_samples, self.cfg.vmr.eta);
        let vmr_records = groups
            .iter()
            .flat_map(|g| {
                g.vmr.iter().enumerate().filter_map(move |(i, v)| {
                    v.map(|estimate| VmrRecord {
                        update,
                        prefix_id: format!("{}-{}-{}", update, g.conditioning, i),
                        k,
                        eta,
                        estimate,
                    })
                })
            })
            .collect();
        let mean_reward = if terminal.is_empty() {
            f64::NAN
        } else {
            mean(&terminal)
        };
        let mean_vmr = (!vmr.is_empty()).then(|| mean(&vmr));
        let grad_norm = out.grad.norm();
        let reward_ok = terminal.is_empty() || mean_reward.is_finite();
        if !(reward_ok
            && mean_vmr.is_none_or(f64::is_finite)
            && grad_norm.is_finite()
            && out.kl.is_finite())
        {
            return Err(VarlError::NonFinite(format!("update report {update}")));
        }
        let l = self.task.schedule().len();
        Ok(UpdateReport {
            update,
            phase,
            mean_reward,
            mean_vmr,
            loss: out.loss,
            kl: out.kl,
            clipped_frac: out.clipped_frac,
            grad_norm,
            step_grad_norms: (0..l).map(|t| out.grad.step_norm(t)).collect(),
            truncation_gap: mean(&gaps),
            vmr_records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bandit() -> FnTask<impl Fn(&VarState) -> f64 + Send + Sync> {
        let s = ScaleSchedule::new(vec![(1, 1)]).unwrap();
        FnTask::new(s, 2, |st: &VarState| {
            if st.grids()[0].tokens()[0] == 0 {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn phase_schedule() {
        let cfg = TrainerConfig {
            updates: 8,
            ..TrainerConfig::default()
        };
        let fine: Vec<Phase> = (0..8).map(|u| cfg.phase_at(u)).collect();
        assert_eq!(
            fine[..4],
            [Phase::Prefix, Phase::Prefix, Phase::Prefix, Phase::Suffix]
        );
        let coarse = TrainerConfig {
            alternation: Alternation::Coarse,
            ..cfg.clone()
        };
        assert_eq!(coarse.phase_at(5), Phase::Prefix);
        assert_eq!(coarse.phase_at(6), Phase::Suffix);
        let vanilla = TrainerConfig {
            mode: TrainMode::Vanilla,
            ..cfg
        };
        assert_eq!(vanilla.phase_at(3), Phase::Full);
    }

    #[test]
    fn lr_schedules() {
        let cfg = TrainerConfig {
            lr: 1.0,
            updates: 10,
            lr_warmup: 2,
            lr_decay: LrDecay::Linear,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 0.5);
        assert!((cfg.lr_at(5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bandit_converges() {
        let task = bandit();
        let cfg = TrainerConfig {
            mode: TrainMode::Vanilla,
            lr: 0.5,
            policy: PolicyInit {
                mode: PolicyMode::Tabular,
                scale: 0.0,
            },
            ..TrainerConfig::default()
        };
        let mut tr = Trainer::new(&task, cfg).unwrap();
        for _ in 0..200 {
            tr.step().unwrap();
        }
        let p = tr
            .params()
            .site_distribution(&VarState::root(), (0, 0))
            .unwrap();
        assert!(p[0] > 0.99, "{p:?}");
    }

    #[test]
    fn zero_lr_keeps_params() {
        let task = bandit();
        let cfg = TrainerConfig {
            mode: TrainMode::Vanilla,
            lr: 0.0,
            ..TrainerConfig::default()
        };
        let mut tr = Trainer::new(&task, cfg).unwrap();
        let before = tr.params().clone();
        for _ in 0..5 {
            tr.step().unwrap();
        }
        assert_eq!(tr.params(), &before);
    }

    #[test]
    fn deterministic_policy_gives_identical_members() {
        let s = ScaleSchedule::new(vec![(1, 1), (1, 2)]).unwrap();
        let task = FnTask::new(s.clone(), 2, |st: &VarState| st.code(2).unwrap() as f64);
        let mut p = PolicyParams::new(s.clone(), 2, PolicyMode::Tabular).unwrap();
        p.set_site_logits(&VarState::root(), (0, 0), &[80.0, 0.0])
            .unwrap();
        let s1 = VarState::from_grids(&s, vec![crate::mdp::TokenGrid::filled((1, 1), 0)]).unwrap();
        p.set_site_logits(&s1, (0, 0), &[0.0, 80.0]).unwrap();
        p.set_site_logits(&s1, (0, 1), &[0.0, 80.0]).unwrap();
        let cfg = TrainerConfig {
            group_size: 2,
            mode: TrainMode::Vanilla,
            ..Default::default()
        };
        let g = collect_group(&task, &p, Phase::Full, &cfg, &PrefixReward::Estimate, 0, 0).unwrap();
        assert_eq!(g.trajectories[0].grids, g.trajectories[1].grids);
        assert_eq!(g.rewards, vec![3.0, 3.0]);
        assert_eq!(g.advantages, vec![0.0, 0.0]);
    }

    #[test]
    fn prefix_reward_at_terminal_split_is_terminal_reward() {
        let s = ScaleSchedule::new(vec![(1, 1), (1, 2)]).unwrap();
        let task = FnTask::new(s.clone(), 2, |st: &VarState| st.code(2).unwrap() as f64);
        let p = PolicyParams::new(s, 2, PolicyMode::Tabular).unwrap();
        let cfg = TrainerConfig {
            split: 2,
            vmr: VmrConfig {
                k_samples: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let g = collect_group(
            &task,
            &p,
            Phase::Prefix,
            &cfg,
            &PrefixReward::Estimate,
            0,
            0,
        )
        .unwrap();
        for (t, r) in g.trajectories.iter().zip(&g.rewards) {
            assert_eq!(*r, t.final_state().code(2).unwrap() as f64);
        }
    }

    #[test]
    fn groups_repeat_under_seed() {
        let s = ScaleSchedule::new(vec![(1, 1), (2, 2)]).unwrap();
        let task = FnTask::new(s.clone(), 3, |st: &VarState| {
            st.code(3).unwrap() as f64 / 100.0
        });
        let p = PolicyParams::new(s, 3, PolicyMode::Contextual).unwrap();
        let cfg = TrainerConfig {
            split: 1,
            ..Default::default()
        };
        for phase in [Phase::Prefix, Phase::Suffix, Phase::Full] {
            let a = collect_group(&task, &p, phase, &cfg, &PrefixReward::Estimate, 4, 1).unwrap();
            let b = collect_group(&task, &p, phase, &cfg, &PrefixReward::Estimate, 4, 1).unwrap();
            assert_eq!(a, b);
        }
        let sfx = collect_group(
            &task,
            &p,
            Phase::Suffix,
            &cfg,
            &PrefixReward::Estimate,
            0,
            0,
        )
        .unwrap();
        assert!(sfx
            .trajectories
            .iter()
            .all(|t| t.start == 1 && t.grids[0] == sfx.trajectories[0].grids[0]));
    }

    #[test]
    fn invalid_split_rejected() {
        let task = bandit();
        assert!(Trainer::new(&task, TrainerConfig::default()).is_err());
    }
}
