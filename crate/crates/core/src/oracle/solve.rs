use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{kl_from_logs, JointPolicy, Lattice, SoftControlProblem};
use crate::error::{invalid, Result};
use crate::math::log_sum_exp;

/// Soft-optimal values, action values and policy of a problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftSolution {
    pub eta: f64,
    /// `values[t][s]` for levels `0..=L`; the last level is the reward.
    pub values: Vec<Vec<f64>>,
    /// `q[t][s * A_t + a]` for levels `0..L`.
    pub q: Vec<Vec<f64>>,
    pub policy: JointPolicy,
}

impl SoftSolution {
    /// `η log Z`, the optimal value at the root.
    pub fn log_partition(&self) -> f64 {
        self.values[0][0]
    }

    /// `V*` at every state holding `split` grids.
    pub fn middle_values(&self, split: usize) -> &[f64] {
        &self.values[split]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

struct Segment {
    values: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    log_pi: Vec<Vec<f64>>,
}

/// Backward soft recursion over levels `lo..hi` for the subtree of states
/// `roots` at level `lo`. `terminal` holds the values at level `hi` of the
/// descendants of `roots`, in code order.
fn backward(
    problem: &SoftControlProblem,
    lo: usize,
    hi: usize,
    roots: std::ops::Range<usize>,
    terminal: Vec<f64>,
) -> Segment {
    let lat = problem.lattice();
    let eta = problem.eta();
    let width = hi - lo;
    let mut values = vec![Vec::new(); width + 1];
    let mut q = vec![Vec::new(); width];
    let mut log_pi = vec![Vec::new(); width];
    values[width] = terminal;
    for level in (lo..hi).rev() {
        let k = level - lo;
        let na = lat.actions(level);
        let span: usize = (lo..level).map(|t| lat.actions(t)).product();
        let first = roots.start * span;
        let count = roots.len() * span;
        let old = &problem.reference_joint().log_probs[level];
        let next = &values[k + 1];
        let rows: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..count)
            .into_par_iter()
            .map(|i| {
                let s = first + i;
                let qs: Vec<f64> = (0..na).map(|a| next[i * na + a]).collect();
                let logits: Vec<f64> = (0..na).map(|a| old[s * na + a] + qs[a] / eta).collect();
                let lse = log_sum_exp(&logits);
                let pi = logits.iter().map(|z| z - lse).collect();
                (eta * lse, qs, pi)
            })
            .collect();
        let mut v = Vec::with_capacity(count);
        let mut qq = Vec::with_capacity(count * na);
        let mut pp = Vec::with_capacity(count * na);
        for (val, qs, pi) in rows {
            v.push(val);
            qq.extend(qs);
            pp.extend(pi);
        }
        values[k] = v;
        q[k] = qq;
        log_pi[k] = pp;
    }
    Segment { values, q, log_pi }
}

/// Exact `V*`, `Q*` and `π*` by backward recursion over all levels.
pub fn solve_soft(problem: &SoftControlProblem) -> SoftSolution {
    let l = problem.lattice().levels();
    let seg = backward(problem, 0, l, 0..1, problem.rewards().to_vec());
    SoftSolution {
        eta: problem.eta(),
        values: seg.values,
        q: seg.q,
        policy: JointPolicy {
            log_probs: seg.log_pi,
        },
    }
}

/// `V*` at every state holding `split` grids, computed directly as
/// `η log E_{p_old}[exp(R/η) | s]` over all completions.
pub fn middle_value(problem: &SoftControlProblem, split: usize) -> Result<Vec<f64>> {
    let lat = problem.lattice();
    let l = lat.levels();
    if split > l {
        return Err(invalid(format!("split {split} exceeds {l} steps")));
    }
    let eta = problem.eta();
    let below: usize = (split..l).map(|t| lat.actions(t)).product();
    let old = &problem.reference_joint().log_probs;
    Ok((0..lat.states(split))
        .into_par_iter()
        .map(|s| {
            let terms: Vec<f64> = (s * below..(s + 1) * below)
                .map(|c| {
                    let lp: f64 = (split..l).map(|t| old[t][lat.ancestor(l, c, t + 1)]).sum();
                    lp + problem.rewards()[c] / eta
                })
                .collect();
            eta * log_sum_exp(&terms)
        })
        .collect())
}

/// Outcome of solving a problem in two stages around `split`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub split: usize,
    /// `KL(p_two_stage || p*)` over full trajectories.
    pub kl_gap: f64,
    /// `|J(two_stage) - J(π*)|`.
    pub value_gap: f64,
    /// Largest gap between per-state suffix solutions and the direct
    /// middle-value enumeration.
    pub middle_value_gap: f64,
    pub objective_full: f64,
    pub objective_two_stage: f64,
}

/// Solves each suffix subproblem from every state with `split` grids, then
/// the prefix problem whose terminal reward is the middle value, and
/// compares the concatenation with the full soft-optimal policy.
pub fn two_stage_check(problem: &SoftControlProblem, split: usize) -> Result<InvarianceReport> {
    let lat: &Lattice = problem.lattice();
    let l = lat.levels();
    let middle = middle_value(problem, split)?;
    let below: usize = (split..l).map(|t| lat.actions(t)).product();

    let mut suffix = JointPolicy {
        log_probs: vec![Vec::new(); l],
    };
    let mut middle_value_gap: f64 = 0.0;
    for (s, &direct) in middle.iter().enumerate() {
        let terminal = problem.rewards()[s * below..(s + 1) * below].to_vec();
        let seg = backward(problem, split, l, s..s + 1, terminal);
        middle_value_gap = middle_value_gap.max((seg.values[0][0] - direct).abs());
        for (k, rows) in seg.log_pi.into_iter().enumerate() {
            suffix.log_probs[split + k].extend(rows);
        }
    }
    let prefix_seg = backward(problem, 0, split, 0..1, middle);
    let mut prefix = JointPolicy {
        log_probs: prefix_seg.log_pi,
    };
    prefix.log_probs.resize(l, Vec::new());
    let combined = prefix.concat(&suffix, split);

    let full = solve_soft(problem);
    let objective_full = problem.objective(&full.policy);
    let objective_two_stage = problem.objective(&combined);
    let kl_gap = kl_from_logs(
        &problem.trajectory_log_probs(&combined),
        &problem.trajectory_log_probs(&full.policy),
    );
    Ok(InvarianceReport {
        split,
        kl_gap,
        value_gap: (objective_two_stage - objective_full).abs(),
        middle_value_gap,
        objective_full,
        objective_two_stage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{PolicyMode, PolicyParams};
    use crate::rng::stream;
    use crate::schedule::ScaleSchedule;
    use rand::Rng;

    fn random_problem(
        seed: u64,
        shapes: Vec<(usize, usize)>,
        vocab: usize,
        eta: f64,
    ) -> SoftControlProblem {
        let s = ScaleSchedule::new(shapes).unwrap();
        let mut rng = stream(seed, &[1]);
        let reference = PolicyParams::random(s, vocab, PolicyMode::Tabular, 1.0, &mut rng).unwrap();
        let n = reference.schedule().total_tokens();
        let rewards = (0..vocab.pow(n as u32))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        SoftControlProblem::new(reference, rewards, eta).unwrap()
    }

    #[test]
    fn single_step_value_is_log_mean_exp() {
        // Uniform reference over two outcomes with rewards 0 and ln 3.
        let s = ScaleSchedule::new(vec![(1, 1)]).unwrap();
        let reference = PolicyParams::new(s, 2, PolicyMode::Tabular).unwrap();
        let p = SoftControlProblem::new(reference, vec![0.0, 3f64.ln()], 1.0).unwrap();
        let sol = solve_soft(&p);
        assert!((sol.log_partition() - 2f64.ln()).abs() < 1e-12);
        let pi = sol.policy.probs(p.lattice(), 0, 0);
        assert!((pi[0] - 0.25).abs() < 1e-12 && (pi[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_direct_enumeration() {
        let p = random_problem(3, vec![(1, 1), (1, 2), (2, 2)], 2, 0.7);
        let sol = solve_soft(&p);
        assert!((sol.log_partition() - p.log_partition()).abs() < 1e-10);
        for split in 0..=3 {
            let direct = middle_value(&p, split).unwrap();
            for (a, b) in direct.iter().zip(sol.middle_values(split)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn optimal_policy_reaches_log_partition() {
        let p = random_problem(8, vec![(1, 1), (2, 2)], 2, 1.3);
        let sol = solve_soft(&p);
        assert!((p.objective(&sol.policy) - sol.log_partition()).abs() < 1e-10);
        let kl = kl_from_logs(
            &p.trajectory_log_probs(&sol.policy),
            &p.optimal_trajectory_log_probs(),
        );
        assert!(kl.abs() < 1e-10);
    }

    #[test]
    fn two_stage_agrees_at_every_split() {
        let p = random_problem(11, vec![(1, 1), (1, 2), (2, 2)], 2, 1.0);
        for split in 0..=3 {
            let r = two_stage_check(&p, split).unwrap();
            assert!(r.kl_gap.abs() < 1e-10, "{r:?}");
            assert!(r.value_gap < 1e-10, "{r:?}");
            assert!(r.middle_value_gap < 1e-10, "{r:?}");
        }
        assert!(two_stage_check(&p, 4).is_err());
    }

    #[test]
    fn solution_exports_json() {
        let p = random_problem(1, vec![(1, 1), (1, 2)], 2, 1.0);
        let sol = solve_soft(&p);
        let back: SoftSolution = serde_json::from_str(&sol.to_json().unwrap()).unwrap();
        assert_eq!(back, sol);
    }
}
