//! Instance generators and checks shared by integration targets.
#![allow(dead_code)]

use rand::Rng;
use varl_core::grpo::{
    collect_group, surrogate_loss, FnTask, Phase, PrefixReward, RolloutGroup, TrainerConfig,
};
use varl_core::mdp::{BlockKey, ParamBlocks, PolicyMode, PolicyParams, Trajectory, VarState};
use varl_core::rng::stream;
use varl_core::schedule::{PanwConfig, ScaleSchedule};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Deterministic pseudo-reward of a terminal pyramid.
pub fn hashed_reward(state: &VarState) -> f64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for g in state.grids() {
        for &t in g.tokens() {
            h = (h ^ u64::from(t)).wrapping_mul(0x1000_0000_01B3);
        }
    }
    (h >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` over the union of materialized entries.
pub fn relative_error(a: &ParamBlocks, b: &ParamBlocks) -> f64 {
    let mut diff = a.clone();
    diff.add_scaled(b, -1.0);
    diff.norm() / a.norm().max(b.norm()).max(1e-8)
}

fn perturbed(params: &PolicyParams, scale: f64, rng: &mut impl Rng) -> PolicyParams {
    let mut p = params.clone();
    for (_, v) in p.blocks_mut().iter_mut() {
        v.iter_mut()
            .for_each(|x| *x += scale * (rng.random::<f64>() - 0.5));
    }
    p
}

/// Central differences of `f` with respect to every materialized entry of
/// `params`.
pub fn finite_difference(params: &PolicyParams, f: impl Fn(&PolicyParams) -> f64) -> ParamBlocks {
    let keys: Vec<(BlockKey, usize)> = params.blocks().iter().map(|(k, v)| (*k, v.len())).collect();
    let mut out = ParamBlocks::new();
    for (key, len) in keys {
        let mut grad = vec![0.0; len];
        for (i, g) in grad.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.blocks_mut().entry(key, len)[i] += FD_STEP;
            let mut minus = params.clone();
            minus.blocks_mut().entry(key, len)[i] -= FD_STEP;
            *g = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        }
        out.insert(key, grad);
    }
    out
}

pub struct SurrogateInstance {
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub groups: Vec<RolloutGroup>,
    pub cfg: TrainerConfig,
}

/// A random surrogate evaluation problem with at most 64 parameters:
/// groups sampled from a snapshot, then evaluated off-snapshot so that
/// ratios differ from one and some sites clip.
pub fn surrogate_instance(seed: u64) -> SurrogateInstance {
    let mut rng = stream(seed, &[0xFD]);
    let (shapes, vocab, mode) = match seed % 4 {
        0 => (vec![(1, 1), (1, 2)], 3, PolicyMode::Tabular),
        1 => (vec![(1, 1), (2, 1)], 2, PolicyMode::Tabular),
        2 => (vec![(1, 1), (1, 2)], 2, PolicyMode::Contextual),
        _ => (vec![(1, 1), (1, 1), (1, 2)], 2, PolicyMode::Tabular),
    };
    let schedule = ScaleSchedule::new(shapes).unwrap();
    let snapshot = PolicyParams::random(schedule.clone(), vocab, mode, 1.0, &mut rng).unwrap();
    assert!(snapshot.blocks().num_values() <= 64);
    let phase = [Phase::Full, Phase::Prefix, Phase::Suffix][(seed / 4 % 3) as usize];
    let cfg = TrainerConfig {
        group_size: 3,
        batch_size: 2,
        split: 1,
        clip_eps: 0.1 + 0.3 * rng.random::<f64>(),
        kl_coef: rng.random::<f64>(),
        panw: PanwConfig {
            alpha: 2.0 * rng.random::<f64>(),
            normalize: rng.random(),
        },
        panw_on_kl: rng.random(),
        seed,
        ..TrainerConfig::default()
    };
    let task = FnTask::new(schedule, vocab, hashed_reward);
    let groups = (0..cfg.batch_size)
        .map(|b| {
            collect_group(&task, &snapshot, phase, &cfg, &PrefixReward::Estimate, 0, b).unwrap()
        })
        .collect();
    SurrogateInstance {
        params: perturbed(&snapshot, 1.5, &mut rng),
        reference: perturbed(&snapshot, 0.6, &mut rng),
        groups,
        cfg,
    }
}

/// Relative error between the analytic surrogate gradient and central
/// differences of the surrogate value.
pub fn surrogate_gradient_error(inst: &SurrogateInstance) -> f64 {
    let analytic = surrogate_loss(&inst.groups, &inst.params, &inst.reference, &inst.cfg)
        .unwrap()
        .grad;
    let fd = finite_difference(&inst.params, |p| {
        surrogate_loss(&inst.groups, p, &inst.reference, &inst.cfg)
            .unwrap()
            .loss
    });
    relative_error(&analytic, &fd)
}

/// Relative error of the weighted log-probability gradient on a random
/// trajectory.
pub fn logprob_gradient_error(seed: u64) -> f64 {
    let inst = surrogate_instance(seed);
    let traj: &Trajectory = &inst.groups[0].trajectories[0];
    let mut rng = stream(seed, &[0x1F]);
    let weights: Vec<Vec<f64>> = traj
        .action_steps()
        .map(|t| {
            (0..traj.action(t).len())
                .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                .collect()
        })
        .collect();
    let analytic = inst.params.logprob_gradient(traj, &weights).unwrap();
    let v = inst.params.vocab();
    let fd = finite_difference(&inst.params, |p| {
        traj.action_steps()
            .zip(&weights)
            .map(|(t, w)| {
                let lp = p.step_log_probs(&traj.state_at(t)).unwrap();
                traj.action(t)
                    .tokens()
                    .iter()
                    .zip(w)
                    .enumerate()
                    .map(|(s, (&tok, wt))| wt * lp[s * v + tok as usize])
                    .sum::<f64>()
            })
            .sum()
    });
    relative_error(&analytic, &fd)
}
