use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mdp::{PolicyMode, PolicyParams};
use crate::oracle::{
    constrained_optimum, kl_from_logs, solve_soft, two_stage_check, InvarianceReport, JointPolicy,
    SoftControlProblem,
};
use crate::rng::stream;
use crate::schedule::ScaleSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    /// Independent uniform rewards per terminal state.
    Random { low: f64, high: f64 },
    /// Explicit rewards indexed by terminal code.
    Table { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    Uniform,
    /// Random tabular logits in `[-scale, scale]`.
    Random {
        scale: f64,
    },
}

/// A family of enumerable problems to verify.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSpec {
    pub schedule: ScaleSchedule,
    pub vocab: usize,
    /// Temperatures, cycled over instances.
    pub etas: Vec<f64>,
    pub instances: usize,
    pub seed: u64,
    pub reward: RewardSpec,
    pub reference: ReferenceSpec,
    /// Random policies per instance for the variational identity.
    pub policies: usize,
    pub policy_scale: f64,
    /// Tolerance on two-stage gaps.
    pub tolerance: f64,
    /// Tolerance on the variational identity and KL decomposition.
    pub identity_tolerance: f64,
    /// Largest acceptable projection stationarity certificate.
    pub certificate_tolerance: f64,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            schedule: ScaleSchedule::new(vec![(1, 1), (2, 2)]).expect("static schedule"),
            vocab: 2,
            etas: vec![1.0],
            instances: 20,
            seed: 0,
            reward: RewardSpec::Random {
                low: -2.0,
                high: 2.0,
            },
            reference: ReferenceSpec::Uniform,
            policies: 100,
            policy_scale: 2.0,
            tolerance: 1e-8,
            identity_tolerance: 1e-9,
            certificate_tolerance: 1e-9,
        }
    }
}

impl ProblemSpec {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(invalid("vocab must be at least 2"));
        }
        if self.etas.is_empty() || self.etas.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(invalid(
                "etas must be a nonempty list of positive temperatures",
            ));
        }
        if self.instances == 0 {
            return Err(invalid("instances must be positive"));
        }
        if let RewardSpec::Random { low, high } = self.reward {
            if !(low <= high && low.is_finite() && high.is_finite()) {
                return Err(invalid("reward range must satisfy low <= high"));
            }
        }
        Ok(())
    }

    /// Builds instance `i`.
    pub fn instance(&self, i: usize) -> Result<SoftControlProblem> {
        let mut rng = stream(self.seed, &[i as u64]);
        let reference = match self.reference {
            ReferenceSpec::Uniform => {
                PolicyParams::new(self.schedule.clone(), self.vocab, PolicyMode::Tabular)?
            }
            ReferenceSpec::Random { scale } => PolicyParams::random(
                self.schedule.clone(),
                self.vocab,
                PolicyMode::Tabular,
                scale,
                &mut rng,
            )?,
        };
        let terminal = crate::oracle::Lattice::new(&self.schedule, self.vocab)?.terminal_states();
        let rewards = match &self.reward {
            RewardSpec::Random { low, high } => (0..terminal)
                .map(|_| {
                    if low == high {
                        *low
                    } else {
                        rng.random_range(*low..*high)
                    }
                })
                .collect(),
            RewardSpec::Table { values } => values.clone(),
        };
        SoftControlProblem::new(reference, rewards, self.etas[i % self.etas.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub index: usize,
    pub eta: f64,
    pub log_partition: f64,
    /// `|V*(root) - η log Z|` between backward recursion and enumeration.
    pub partition_gap: f64,
    pub invariance: Vec<InvarianceReport>,
    /// Largest `|J(π) - (η log Z - η KL(p_π || p*))|` over random policies.
    pub identity_gap: f64,
    /// Largest `|KL(p_π || p*) - Σ_t E[KL(π(.|s) || π*(.|s))]|`.
    pub decomposition_gap: f64,
    pub projection_objective: f64,
    pub projection_non_converged: usize,
    pub projection_certificate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<PropertyCheck>,
    pub instances: Vec<InstanceReport>,
    pub passed: bool,
}

fn verify_instance(spec: &ProblemSpec, index: usize) -> Result<InstanceReport> {
    let problem = spec.instance(index)?;
    let lat = problem.lattice();
    let solution = solve_soft(&problem);
    let log_partition = problem.log_partition();
    let invariance = (0..=lat.levels())
        .map(|m| two_stage_check(&problem, m))
        .collect::<Result<Vec<_>>>()?;

    let eta = problem.eta();
    let optimal = problem.optimal_trajectory_log_probs();
    let mut rng = stream(spec.seed, &[index as u64, 1]);
    let mut identity_gap: f64 = 0.0;
    let mut decomposition_gap: f64 = 0.0;
    for _ in 0..spec.policies {
        let params = PolicyParams::random(
            spec.schedule.clone(),
            spec.vocab,
            PolicyMode::Tabular,
            spec.policy_scale,
            &mut rng,
        )?;
        let policy = JointPolicy::from_params(lat, &params)?;
        let kl = kl_from_logs(&problem.trajectory_log_probs(&policy), &optimal);
        let j = problem.objective(&policy);
        identity_gap = identity_gap.max((j - (log_partition - eta * kl)).abs());
        let chained = problem.chained_state_kl(&policy, &solution.policy);
        decomposition_gap = decomposition_gap.max((kl - chained).abs());
    }

    let projected = constrained_optimum(&problem, &solution, spec.seed ^ index as u64);
    Ok(InstanceReport {
        index,
        eta,
        log_partition,
        partition_gap: (solution.log_partition() - log_partition).abs(),
        invariance,
        identity_gap,
        decomposition_gap,
        projection_objective: projected.objective,
        projection_non_converged: projected.non_converged,
        projection_certificate: projected.max_certificate,
    })
}

fn check(name: &str, measured: f64, tolerance: f64) -> PropertyCheck {
    PropertyCheck {
        name: name.into(),
        passed: measured <= tolerance,
        measured,
        tolerance,
    }
}

/// Solves every instance exactly and checks two-stage invariance at every
/// split, the variational identity, the per-state KL decomposition and the
/// projection stationarity certificates.
pub fn verify_theory(spec: &ProblemSpec) -> Result<VerificationReport> {
    spec.validate()?;
    let instances = (0..spec.instances)
        .map(|i| verify_instance(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let max = |f: &dyn Fn(&InstanceReport) -> f64| instances.iter().map(f).fold(0.0, f64::max);
    let checks = vec![
        check(
            "log-partition: recursion vs enumeration",
            max(&|r| r.partition_gap),
            spec.identity_tolerance,
        ),
        check(
            "two-stage kl gap",
            max(&|r| {
                r.invariance
                    .iter()
                    .map(|x| x.kl_gap.abs())
                    .fold(0.0, f64::max)
            }),
            spec.tolerance,
        ),
        check(
            "two-stage value gap",
            max(&|r| r.invariance.iter().map(|x| x.value_gap).fold(0.0, f64::max)),
            spec.tolerance,
        ),
        check(
            "middle value: suffix solve vs enumeration",
            max(&|r| {
                r.invariance
                    .iter()
                    .map(|x| x.middle_value_gap)
                    .fold(0.0, f64::max)
            }),
            spec.tolerance,
        ),
        check(
            "variational identity",
            max(&|r| r.identity_gap),
            spec.identity_tolerance,
        ),
        check(
            "per-state kl decomposition",
            max(&|r| r.decomposition_gap),
            spec.identity_tolerance,
        ),
        check(
            "projection stationarity",
            max(&|r| r.projection_certificate),
            spec.certificate_tolerance,
        ),
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerificationReport {
        checks,
        instances,
        passed,
    })
}
