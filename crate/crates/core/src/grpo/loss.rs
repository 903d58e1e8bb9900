use rayon::prelude::*;

use super::{Phase, RolloutGroup, TrainerConfig};
use crate::error::{Result, VarlError};
use crate::math::softmax;
use crate::mdp::{ParamBlocks, PolicyParams};
use crate::schedule::panw_weights_for;

/// `(R_i - mean) / max(std, floor)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let scale = var.sqrt().max(std_floor);
    rewards.iter().map(|r| (r - mean) / scale).collect()
}

/// Loss value, gradient and diagnostics of one surrogate evaluation.
#[derive(Debug, Clone)]
pub struct SurrogateOutput {
    pub loss: f64,
    /// Mean per-site `KL(π_θ || π_old)` over visited sites.
    pub kl: f64,
    pub clipped_frac: f64,
    pub grad: ParamBlocks,
    pub sites: usize,
}

struct Partial {
    loss: f64,
    kl: f64,
    clipped: usize,
    sites: usize,
    grad: ParamBlocks,
}

/// Clipped group-relative surrogate with a per-site exact KL penalty.
///
/// Each visited site contributes `-min(ρA, clip(ρ)A) + β KL` scaled by its
/// step weight and mask gate; the sum is divided by the number of visited
/// sites. `ρ` compares the current policy with the log-probabilities the
/// trajectory was sampled with.
pub fn surrogate_loss(
    groups: &[RolloutGroup],
    params: &PolicyParams,
    reference: &PolicyParams,
    cfg: &TrainerConfig,
) -> Result<SurrogateOutput> {
    let schedule = params.schedule();
    let v = params.vocab();
    let eps = cfg.clip_eps;
    let items: Vec<(&RolloutGroup, usize)> = groups
        .iter()
        .flat_map(|g| (0..g.trajectories.len()).map(move |i| (g, i)))
        .collect();
    let partials: Vec<Partial> = items
        .par_iter()
        .map(|&(group, i)| {
            let traj = &group.trajectories[i];
            let adv = group.advantages[i];
            let steps = group.phase.steps(schedule.len(), cfg.split);
            let k = panw_weights_for(schedule, steps, &cfg.panw);
            let mut grad = ParamBlocks::new();
            let (mut loss, mut kl_sum, mut clipped, mut sites) = (0.0, 0.0, 0, 0);
            for (row, t) in traj.action_steps().enumerate() {
                let state = traj.state_at(t);
                let tokens = traj.action(t).tokens();
                let logits = params.step_logits(&state)?;
                let ref_logits = reference.step_logits(&state)?;
                let gates = group.gates.get(i).and_then(|g| g.as_ref()).map(|g| &g[t]);
                let mut dlogits = vec![0.0; logits.len()];
                for (site, &tok) in tokens.iter().enumerate() {
                    sites += 1;
                    let gate = gates.map_or(1.0, |g| g[site]);
                    let w = k[t] * gate;
                    let w_kl = if cfg.panw_on_kl { w } else { gate };
                    if w == 0.0 && w_kl == 0.0 {
                        continue;
                    }
                    let range = site * v..(site + 1) * v;
                    let p = softmax(&logits[range.clone()]);
                    let q = softmax(&ref_logits[range]);
                    let lp = p[tok as usize].ln();
                    let rho = (lp - traj.sample_log_probs[row][site]).exp();
                    if !rho.is_finite() {
                        return Err(VarlError::NonFinite(format!(
                            "importance ratio at step {t}, site {site}"
                        )));
                    }
                    let clip = rho.clamp(1.0 - eps, 1.0 + eps);
                    if clip != rho {
                        clipped += 1;
                    }
                    let unclipped = rho * adv;
                    let clipped_val = clip * adv;
                    // d(-ρA)/dz = -ρA (onehot - p) on the unclipped branch only.
                    let coef = if unclipped <= clipped_val {
                        loss -= w * unclipped;
                        -w * unclipped
                    } else {
                        loss -= w * clipped_val;
                        0.0
                    };
                    let mut kl = 0.0;
                    for a in 0..v {
                        if p[a] > 0.0 {
                            kl += p[a] * (p[a].ln() - q[a].ln());
                        }
                    }
                    kl_sum += kl;
                    loss += cfg.kl_coef * w_kl * kl;
                    for a in 0..v {
                        let onehot = if a == tok as usize { 1.0 } else { 0.0 };
                        let mut d = coef * (onehot - p[a]);
                        if p[a] > 0.0 {
                            d += cfg.kl_coef * w_kl * p[a] * (p[a].ln() - q[a].ln() - kl);
                        }
                        dlogits[site * v + a] = d;
                    }
                }
                if dlogits.iter().any(|&d| d != 0.0) {
                    params.accumulate_logit_grad(&state, &dlogits, &mut grad)?;
                }
            }
            Ok(Partial {
                loss,
                kl: kl_sum,
                clipped,
                sites,
                grad,
            })
        })
        .collect::<Result<_>>()?;

    let mut out = SurrogateOutput {
        loss: 0.0,
        kl: 0.0,
        clipped_frac: 0.0,
        grad: ParamBlocks::new(),
        sites: 0,
    };
    let mut clipped = 0;
    for p in partials {
        out.loss += p.loss;
        out.kl += p.kl;
        clipped += p.clipped;
        out.sites += p.sites;
        out.grad.add_scaled(&p.grad, 1.0);
    }
    let n = out.sites.max(1) as f64;
    out.loss /= n;
    out.kl /= n;
    out.clipped_frac = clipped as f64 / n;
    out.grad.scale(1.0 / n);
    if !out.loss.is_finite() || !out.grad.all_finite() {
        return Err(VarlError::NonFinite("surrogate loss or gradient".into()));
    }
    Ok(out)
}

impl Phase {
    /// Action steps trained in this phase.
    pub fn steps(self, len: usize, split: usize) -> std::ops::Range<usize> {
        match self {
            Phase::Full => 0..len,
            Phase::Prefix => 0..split.min(len),
            Phase::Suffix => split.min(len)..len,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[0.3, 0.3, 0.3], 1e-6), vec![0.0; 3]);
        assert_eq!(group_advantages(&[0.0, 1.0], 1e-6), vec![-1.0, 1.0]);
        let a = group_advantages(&[1.0, 2.0, 3.0], 1e-6);
        let r = 1.5f64.sqrt();
        assert!((a[0] + r).abs() < 1e-12 && a[1].abs() < 1e-12 && (a[2] - r).abs() < 1e-12);
    }

    #[test]
    fn advantages_shift_invariant() {
        let r = [0.1, -0.4, 2.0, 0.7];
        let a = group_advantages(&r, 1e-6);
        let shifted: Vec<f64> = r.iter().map(|x| x + 5.0).collect();
        let b = group_advantages(&shifted, 1e-6);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(a.iter().sum::<f64>().abs() < 1e-9);
    }
}
