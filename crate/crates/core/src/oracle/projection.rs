use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{JointPolicy, SoftControlProblem, SoftSolution};
use crate::math::{softmax, total_variation};
use crate::rng::stream;

/// Floor applied to `log p` where the target puts (near) zero mass, so the
/// coordinate updates stay finite.
pub const LOG_FLOOR: f64 = -700.0;

const MAX_SWEEPS: usize = 10_000;
const SWEEP_TOL: f64 = 1e-10;

/// A distribution over the joint tokens of one grid, first site most
/// significant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDist {
    pub sites: usize,
    pub vocab: usize,
    pub probs: Vec<f64>,
}

impl JointDist {
    pub fn new(sites: usize, vocab: usize, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), vocab.pow(sites as u32), "joint table size");
        Self {
            sites,
            vocab,
            probs,
        }
    }

    fn digits(&self) -> Vec<Vec<usize>> {
        (0..self.probs.len())
            .map(|mut a| {
                let mut d = vec![0; self.sites];
                for slot in d.iter_mut().rev() {
                    *slot = a % self.vocab;
                    a /= self.vocab;
                }
                d
            })
            .collect()
    }

    fn floored_logs(&self) -> Vec<f64> {
        self.probs
            .iter()
            .map(|&p| {
                if p > 0.0 {
                    p.ln().max(LOG_FLOOR)
                } else {
                    LOG_FLOOR
                }
            })
            .collect()
    }

    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.vocab]; self.sites];
        for (a, d) in self.digits().iter().enumerate() {
            for (i, &x) in d.iter().enumerate() {
                m[i][x] += self.probs[a];
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionStart {
    Marginals,
    Random,
    Given,
}

/// A product distribution minimizing `KL(q || p)` locally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub factors: Vec<Vec<f64>>,
    /// `KL(q || p)` with the log floor applied.
    pub kl: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Largest decrease of the objective any single exact coordinate update
    /// could still achieve.
    pub certificate: f64,
    pub start: ProjectionStart,
}

impl Projection {
    /// Joint probabilities of the product.
    pub fn joint(&self) -> Vec<f64> {
        product_log_probs(&self.factors)
            .into_iter()
            .map(f64::exp)
            .collect()
    }
}

fn product_log_probs(factors: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0];
    for f in factors {
        acc = acc
            .iter()
            .flat_map(|&a| {
                f.iter().map(move |&q| {
                    if q > 0.0 {
                        a + q.ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
            })
            .collect();
    }
    acc
}

struct Workspace<'a> {
    target: &'a JointDist,
    digits: Vec<Vec<usize>>,
    logp: Vec<f64>,
}

impl Workspace<'_> {
    fn objective(&self, factors: &[Vec<f64>]) -> f64 {
        product_log_probs(factors)
            .iter()
            .zip(&self.logp)
            .map(|(&lq, &lp)| {
                if lq == f64::NEG_INFINITY {
                    0.0
                } else {
                    lq.exp() * (lq - lp)
                }
            })
            .sum()
    }

    /// Exact minimizer over site `i` with the other factors fixed.
    fn coordinate(&self, factors: &[Vec<f64>], i: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.target.vocab];
        for (a, d) in self.digits.iter().enumerate() {
            let w: f64 = d
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &x)| factors[j][x])
                .product();
            if w > 0.0 {
                e[d[i]] += w * self.logp[a];
            }
        }
        softmax(&e)
    }

    fn certificate(&self, factors: &[Vec<f64>]) -> f64 {
        let base = self.objective(factors);
        (0..factors.len())
            .map(|i| {
                let mut f = factors.to_vec();
                f[i] = self.coordinate(factors, i);
                base - self.objective(&f)
            })
            .fold(0.0, f64::max)
    }
}

/// Coordinate ascent from a given product start.
pub fn project_from(target: &JointDist, init: Vec<Vec<f64>>, start: ProjectionStart) -> Projection {
    let ws = Workspace {
        target,
        digits: target.digits(),
        logp: target.floored_logs(),
    };
    let mut factors = init;
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut change: f64 = 0.0;
        for i in 0..target.sites {
            let next = ws.coordinate(&factors, i);
            change = change.max(total_variation(&next, &factors[i]));
            factors[i] = next;
        }
        if change < SWEEP_TOL {
            converged = true;
            break;
        }
    }
    Projection {
        kl: ws.objective(&factors),
        certificate: ws.certificate(&factors),
        factors,
        sweeps,
        converged,
        start,
    }
}

/// Reverse-KL projection onto per-site products: runs from the product of
/// marginals and from a seeded random product and keeps the better result.
pub fn reverse_kl_project(target: &JointDist, seed: u64) -> Projection {
    let from_marginals = project_from(target, target.marginals(), ProjectionStart::Marginals);
    if target.sites <= 1 {
        return from_marginals;
    }
    let mut rng = stream(seed, &[]);
    let init = (0..target.sites)
        .map(|_| {
            let z: Vec<f64> = (0..target.vocab)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            softmax(&z)
        })
        .collect();
    let from_random = project_from(target, init, ProjectionStart::Random);
    if from_random.kl < from_marginals.kl {
        from_random
    } else {
        from_marginals
    }
}

/// Product of the target's per-site marginals.
pub fn product_of_marginals(target: &JointDist) -> Vec<Vec<f64>> {
    target.marginals()
}

/// The factorized policy obtained by projecting `π*` state by state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedOptimum {
    pub policy: JointPolicy,
    pub objective: f64,
    /// States whose projection hit the sweep cap.
    pub non_converged: usize,
    pub max_certificate: f64,
}

fn target_at(
    problem: &SoftControlProblem,
    solution: &SoftSolution,
    level: usize,
    state: usize,
) -> JointDist {
    let lat = problem.lattice();
    JointDist::new(
        lat.schedule().sites(level),
        lat.vocab(),
        solution.policy.probs(lat, level, state),
    )
}

/// Per-state reverse-KL projection of the soft-optimal policy.
pub fn constrained_optimum(
    problem: &SoftControlProblem,
    solution: &SoftSolution,
    seed: u64,
) -> ConstrainedOptimum {
    let lat = problem.lattice();
    let mut log_probs = Vec::with_capacity(lat.levels());
    let mut non_converged = 0;
    let mut max_certificate: f64 = 0.0;
    for level in 0..lat.levels() {
        let projections: Vec<Projection> = (0..lat.states(level))
            .into_par_iter()
            .map(|s| {
                let target = target_at(problem, solution, level, s);
                reverse_kl_project(
                    &target,
                    crate::rng::derive_seed(seed, &[level as u64, s as u64]),
                )
            })
            .collect();
        let mut rows = Vec::with_capacity(lat.states(level + 1));
        for p in projections {
            non_converged += usize::from(!p.converged);
            max_certificate = max_certificate.max(p.certificate);
            rows.extend(product_log_probs(&p.factors));
        }
        log_probs.push(rows);
    }
    let policy = JointPolicy { log_probs };
    ConstrainedOptimum {
        objective: problem.objective(&policy),
        policy,
        non_converged,
        max_certificate,
    }
}

/// The policy that plays the product of `π*` marginals at every state.
pub fn marginal_policy(problem: &SoftControlProblem, solution: &SoftSolution) -> JointPolicy {
    let lat = problem.lattice();
    let log_probs = (0..lat.levels())
        .map(|level| {
            (0..lat.states(level))
                .flat_map(|s| {
                    product_log_probs(&target_at(problem, solution, level, s).marginals())
                })
                .collect()
        })
        .collect();
    JointPolicy { log_probs }
}
