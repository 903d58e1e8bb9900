//! Factorized per-site categorical policies.
//!
//! Parameters are stored as sparse blocks keyed by `(step, state code)`.
//! In tabular mode a block holds the logits of every site for one exact
//! prefix state and an absent block means all-zero logits. In contextual
//! mode there is one block per step holding a linear map from a small
//! state feature vector to each site's logits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{TokenGrid, Trajectory, VarState};
use crate::error::{Result, VarlError};
use crate::math::{log_softmax, softmax};
use crate::schedule::ScaleSchedule;

/// Default cap on `Σ_t V^(tokens before t)` for tabular policies.
pub const DEFAULT_STATE_BOUND: u64 = 1 << 20;

const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockKey {
    pub step: usize,
    pub state: u64,
}

/// A sparse, ordered collection of parameter blocks. Used for parameters,
/// gradients and optimizer state alike; iteration order is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamBlocks {
    blocks: BTreeMap<BlockKey, Vec<f64>>,
}

impl ParamBlocks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &BlockKey) -> Option<&[f64]> {
        self.blocks.get(key).map(Vec::as_slice)
    }

    /// Mutable access, materializing a zero block of length `len` if absent.
    pub fn entry(&mut self, key: BlockKey, len: usize) -> &mut Vec<f64> {
        self.blocks.entry(key).or_insert_with(|| vec![0.0; len])
    }

    pub fn insert(&mut self, key: BlockKey, values: Vec<f64>) {
        self.blocks.insert(key, values);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BlockKey, &Vec<f64>)> {
        self.blocks.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&BlockKey, &mut Vec<f64>)> {
        self.blocks.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Total number of stored scalars.
    pub fn num_values(&self) -> usize {
        self.blocks.values().map(Vec::len).sum()
    }

    /// `self += scale * other`, block by block in key order.
    pub fn add_scaled(&mut self, other: &ParamBlocks, scale: f64) {
        for (key, values) in &other.blocks {
            let dst = self.entry(*key, values.len());
            for (d, s) in dst.iter_mut().zip(values) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.blocks.values_mut() {
            v.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn dot(&self, other: &ParamBlocks) -> f64 {
        self.blocks
            .iter()
            .filter_map(|(k, a)| {
                other
                    .get(k)
                    .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            })
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// L2 norm restricted to the blocks of one step.
    pub fn step_norm(&self, step: usize) -> f64 {
        self.blocks
            .iter()
            .filter(|(k, _)| k.step == step)
            .flat_map(|(_, v)| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks
            .values()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    /// One logit table per exact prefix state.
    Tabular,
    /// Shared linear map from pooled state features to logits.
    Contextual,
}

/// Parameters of a policy in the site-factorized family.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    schedule: ScaleSchedule,
    vocab: usize,
    mode: PolicyMode,
    state_bound: u64,
    blocks: ParamBlocks,
}

impl PolicyParams {
    pub fn new(schedule: ScaleSchedule, vocab: usize, mode: PolicyMode) -> Result<Self> {
        Self::with_state_bound(schedule, vocab, mode, DEFAULT_STATE_BOUND)
    }

    pub fn with_state_bound(
        schedule: ScaleSchedule,
        vocab: usize,
        mode: PolicyMode,
        state_bound: u64,
    ) -> Result<Self> {
        if vocab < 2 {
            return Err(VarlError::InvalidConfig(format!(
                "vocabulary size must be >= 2, got {vocab}"
            )));
        }
        if mode == PolicyMode::Tabular {
            let count = tabular_state_count(&schedule, vocab);
            if count > state_bound {
                return Err(VarlError::TooLarge(format!(
                    "tabular policy needs {count} prefix states, bound is {state_bound}"
                )));
            }
        }
        Ok(Self {
            schedule,
            vocab,
            mode,
            state_bound,
            blocks: ParamBlocks::new(),
        })
    }

    /// Policy with i.i.d. normal-ish logits of the given scale at every
    /// state (tabular) or weight (contextual).
    pub fn random(
        schedule: ScaleSchedule,
        vocab: usize,
        mode: PolicyMode,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut p = Self::new(schedule, vocab, mode)?;
        for step in 0..p.schedule.len() {
            let len = p.block_len(step);
            let states = match mode {
                PolicyMode::Tabular => (vocab as u64).pow(p.schedule.tokens_before(step) as u32),
                PolicyMode::Contextual => 1,
            };
            for state in 0..states {
                // sum of uniforms, roughly normal with unit variance
                let values = (0..len)
                    .map(|_| {
                        let s: f64 = (0..4).map(|_| rng.random::<f64>() - 0.5).sum();
                        scale * s * 3f64.sqrt()
                    })
                    .collect();
                p.blocks.insert(BlockKey { step, state }, values);
            }
        }
        Ok(p)
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn mode(&self) -> PolicyMode {
        self.mode
    }

    pub fn blocks(&self) -> &ParamBlocks {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut ParamBlocks {
        &mut self.blocks
    }

    /// Width of the contextual feature vector: a 2x2 pooled token histogram
    /// of the last grid followed by a one-hot of the step.
    pub fn feature_dim(&self) -> usize {
        4 * self.vocab + self.schedule.len()
    }

    pub fn block_len(&self, step: usize) -> usize {
        let per_site = match self.mode {
            PolicyMode::Tabular => self.vocab,
            PolicyMode::Contextual => self.vocab * self.feature_dim(),
        };
        self.schedule.sites(step) * per_site
    }

    pub fn block_key(&self, state: &VarState) -> Result<BlockKey> {
        let step = state.step();
        if step >= self.schedule.len() {
            return Err(VarlError::ShapeMismatch(format!(
                "state at step {step} has no action"
            )));
        }
        match self.mode {
            PolicyMode::Tabular => {
                let code = state.code(self.vocab).ok_or(VarlError::UnknownState {
                    step,
                    code: u64::MAX,
                })?;
                let states = (self.vocab as u64).pow(self.schedule.tokens_before(step) as u32);
                if code >= states || !self.state_matches(state) {
                    return Err(VarlError::UnknownState { step, code });
                }
                Ok(BlockKey { step, state: code })
            }
            PolicyMode::Contextual => Ok(BlockKey { step, state: 0 }),
        }
    }

    fn state_matches(&self, state: &VarState) -> bool {
        state.grids().iter().enumerate().all(|(t, g)| {
            g.shape() == self.schedule.shape(t)
                && g.tokens().iter().all(|&x| (x as usize) < self.vocab)
        })
    }

    /// Pooled features of a state (contextual mode).
    pub fn features(&self, state: &VarState) -> Vec<f64> {
        let v = self.vocab;
        let mut x = vec![0.0; self.feature_dim()];
        if let Some(last) = state.last_grid() {
            let (h, w) = last.shape();
            let mut counts = [0usize; 4];
            for i in 0..h {
                for j in 0..w {
                    let q = (2 * i / h) * 2 + (2 * j / w);
                    counts[q] += 1;
                    x[q * v + last.get(i, j) as usize] += 1.0;
                }
            }
            for (q, &c) in counts.iter().enumerate() {
                if c > 0 {
                    x[q * v..(q + 1) * v]
                        .iter_mut()
                        .for_each(|f| *f /= c as f64);
                }
            }
        }
        if state.step() < self.schedule.len() {
            x[4 * v + state.step()] = 1.0;
        }
        x
    }

    /// Logits of every site at this state, `sites x vocab` row-major.
    pub fn step_logits(&self, state: &VarState) -> Result<Vec<f64>> {
        let key = self.block_key(state)?;
        let len = self.block_len(key.step);
        match self.mode {
            PolicyMode::Tabular => Ok(self
                .blocks
                .get(&key)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; len])),
            PolicyMode::Contextual => {
                let sites = self.schedule.sites(key.step);
                let v = self.vocab;
                let Some(w) = self.blocks.get(&key) else {
                    return Ok(vec![0.0; sites * v]);
                };
                let x = self.features(state);
                let f = x.len();
                Ok(w.chunks_exact(f)
                    .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
                    .collect())
            }
        }
    }

    /// Per-site log-probabilities at this state, `sites x vocab` row-major.
    pub fn step_log_probs(&self, state: &VarState) -> Result<Vec<f64>> {
        let logits = self.step_logits(state)?;
        Ok(logits
            .chunks_exact(self.vocab)
            .flat_map(log_softmax)
            .collect())
    }

    pub fn site_logits(&self, state: &VarState, site: (usize, usize)) -> Result<Vec<f64>> {
        let idx = self.site_index(state.step(), site)?;
        let logits = self.step_logits(state)?;
        Ok(logits[idx * self.vocab..(idx + 1) * self.vocab].to_vec())
    }

    /// Categorical distribution of one site at this state.
    pub fn site_distribution(&self, state: &VarState, site: (usize, usize)) -> Result<Vec<f64>> {
        Ok(softmax(&self.site_logits(state, site)?))
    }

    fn site_index(&self, step: usize, (i, j): (usize, usize)) -> Result<usize> {
        if step >= self.schedule.len() {
            return Err(VarlError::ShapeMismatch(format!(
                "state at step {step} has no action"
            )));
        }
        let (h, w) = self.schedule.shape(step);
        if i >= h || j >= w {
            return Err(VarlError::OutOfBounds(i, j));
        }
        Ok(i * w + j)
    }

    /// Overwrites one site's logits (tabular) at the given state.
    pub fn set_site_logits(
        &mut self,
        state: &VarState,
        site: (usize, usize),
        logits: &[f64],
    ) -> Result<()> {
        if self.mode != PolicyMode::Tabular {
            return Err(VarlError::InvalidConfig(
                "set_site_logits needs a tabular policy".into(),
            ));
        }
        let key = self.block_key(state)?;
        let idx = self.site_index(key.step, site)?;
        let len = self.block_len(key.step);
        let v = self.vocab;
        if logits.len() != v {
            return Err(VarlError::ShapeMismatch(format!(
                "expected {v} logits, got {}",
                logits.len()
            )));
        }
        self.blocks.entry(key, len)[idx * v..(idx + 1) * v].copy_from_slice(logits);
        Ok(())
    }

    /// Chains a gradient with respect to this state's logits
    /// (`sites x vocab`) into parameter space and adds it to `grad`.
    pub fn accumulate_logit_grad(
        &self,
        state: &VarState,
        dlogits: &[f64],
        grad: &mut ParamBlocks,
    ) -> Result<()> {
        let key = self.block_key(state)?;
        let len = self.block_len(key.step);
        let dst = grad.entry(key, len);
        match self.mode {
            PolicyMode::Tabular => {
                for (d, g) in dst.iter_mut().zip(dlogits) {
                    *d += g;
                }
            }
            PolicyMode::Contextual => {
                let x = self.features(state);
                for (row, &g) in dst.chunks_exact_mut(x.len()).zip(dlogits) {
                    if g != 0.0 {
                        for (d, xf) in row.iter_mut().zip(&x) {
                            *d += g * xf;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient of `Σ_t Σ_site weight * log π(token)` over the trajectory's
    /// action steps. `weights[k]` holds the per-site weights of the k-th
    /// action step of `traj`.
    pub fn logprob_gradient(&self, traj: &Trajectory, weights: &[Vec<f64>]) -> Result<ParamBlocks> {
        let steps = traj.action_steps();
        if weights.len() != steps.len() {
            return Err(VarlError::ShapeMismatch(format!(
                "{} weight rows for {} action steps",
                weights.len(),
                steps.len()
            )));
        }
        let mut grad = ParamBlocks::new();
        let v = self.vocab;
        for (k, step) in steps.enumerate() {
            let state = traj.state_at(step);
            let action = traj.action(step);
            let w = &weights[k];
            if w.len() != action.len() {
                return Err(VarlError::ShapeMismatch(format!(
                    "step {step}: {} weights for {} sites",
                    w.len(),
                    action.len()
                )));
            }
            if w.iter().all(|&x| x == 0.0) {
                continue;
            }
            let logits = self.step_logits(&state)?;
            let mut dlogits = vec![0.0; logits.len()];
            for (site, (&tok, &wt)) in action.tokens().iter().zip(w).enumerate() {
                let probs = softmax(&logits[site * v..(site + 1) * v]);
                for (a, p) in probs.iter().enumerate() {
                    let onehot = if a == tok as usize { 1.0 } else { 0.0 };
                    dlogits[site * v + a] = wt * (onehot - p);
                }
            }
            self.accumulate_logit_grad(&state, &dlogits, &mut grad)?;
        }
        Ok(grad)
    }

    /// `θ += scale * delta`.
    pub fn apply(&mut self, delta: &ParamBlocks, scale: f64) {
        if scale == 0.0 {
            return;
        }
        self.blocks.add_scaled(delta, scale);
    }

    /// Log-probability of a full action grid at `state`.
    pub fn action_log_prob(&self, state: &VarState, action: &TokenGrid) -> Result<f64> {
        let lp = self.step_log_probs(state)?;
        if action.shape() != self.schedule.shape(state.step()) {
            return Err(VarlError::ShapeMismatch(format!(
                "action shape {:?} vs scheduled {:?}",
                action.shape(),
                self.schedule.shape(state.step())
            )));
        }
        Ok(action
            .tokens()
            .iter()
            .enumerate()
            .map(|(site, &t)| lp[site * self.vocab + t as usize])
            .sum())
    }

    pub fn to_artifact(&self, seed: Option<u64>) -> ParamsArtifact {
        ParamsArtifact {
            version: PARAMS_VERSION,
            seed,
            mode: self.mode,
            vocab: self.vocab,
            schedule: self.schedule.clone(),
            state_bound: self.state_bound,
            blocks: self
                .blocks
                .iter()
                .map(|(k, v)| BlockRecord {
                    step: k.step,
                    state: k.state,
                    values: v.clone(),
                })
                .collect(),
        }
    }

    pub fn from_artifact(a: ParamsArtifact) -> Result<Self> {
        if a.version != PARAMS_VERSION {
            return Err(VarlError::InvalidConfig(format!(
                "unsupported params version {}",
                a.version
            )));
        }
        let mut p = Self::with_state_bound(a.schedule, a.vocab, a.mode, a.state_bound)?;
        for rec in a.blocks {
            if rec.step >= p.schedule.len() || rec.values.len() != p.block_len(rec.step) {
                return Err(VarlError::ShapeMismatch(format!(
                    "bad block at step {}",
                    rec.step
                )));
            }
            p.blocks.insert(
                BlockKey {
                    step: rec.step,
                    state: rec.state,
                },
                rec.values,
            );
        }
        Ok(p)
    }

    pub fn save_json(&self, path: impl AsRef<Path>, seed: Option<u64>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_artifact(seed))?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let a: ParamsArtifact = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_artifact(a)
    }
}

/// `Σ_t V^(tokens before t)`, saturating.
pub fn tabular_state_count(schedule: &ScaleSchedule, vocab: usize) -> u64 {
    (0..schedule.len())
        .map(|t| (vocab as u64).saturating_pow(schedule.tokens_before(t) as u32))
        .fold(0u64, u64::saturating_add)
}

/// Versioned on-disk form of [`PolicyParams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsArtifact {
    pub version: u32,
    pub seed: Option<u64>,
    pub mode: PolicyMode,
    pub vocab: usize,
    pub schedule: ScaleSchedule,
    pub state_bound: u64,
    pub blocks: Vec<BlockRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockRecord {
    pub step: usize,
    pub state: u64,
    pub values: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small() -> ScaleSchedule {
        ScaleSchedule::new(vec![(1, 1), (2, 2)]).unwrap()
    }

    #[test]
    fn zero_logits_are_uniform() {
        let p = PolicyParams::new(
            ScaleSchedule::new(vec![(1, 1)]).unwrap(),
            4,
            PolicyMode::Tabular,
        )
        .unwrap();
        let d = p.site_distribution(&VarState::root(), (0, 0)).unwrap();
        assert_eq!(d, vec![0.25; 4]);
    }

    #[test]
    fn hand_softmax() {
        let mut p = PolicyParams::new(
            ScaleSchedule::new(vec![(1, 1)]).unwrap(),
            2,
            PolicyMode::Tabular,
        )
        .unwrap();
        p.set_site_logits(&VarState::root(), (0, 0), &[1f64.ln(), 3f64.ln()])
            .unwrap();
        let d = p.site_distribution(&VarState::root(), (0, 0)).unwrap();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
        p.set_site_logits(
            &VarState::root(),
            (0, 0),
            &[1f64.ln() + 7.5, 3f64.ln() + 7.5],
        )
        .unwrap();
        let shifted = p.site_distribution(&VarState::root(), (0, 0)).unwrap();
        assert!((shifted[0] - d[0]).abs() < 1e-15);
    }

    #[test]
    fn tabular_bound_enforced() {
        let s = ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)]).unwrap();
        assert!(PolicyParams::new(s.clone(), 8, PolicyMode::Tabular).is_ok());
        assert!(matches!(
            PolicyParams::with_state_bound(s.clone(), 8, PolicyMode::Tabular, 1000),
            Err(VarlError::TooLarge(_))
        ));
        let big = ScaleSchedule::new(vec![(1, 1), (4, 4), (4, 4)]).unwrap();
        assert!(PolicyParams::new(big.clone(), 8, PolicyMode::Tabular).is_err());
        assert!(PolicyParams::new(big, 8, PolicyMode::Contextual).is_ok());
    }

    #[test]
    fn unknown_state_rejected() {
        let p = PolicyParams::new(small(), 2, PolicyMode::Tabular).unwrap();
        let bad = VarState::from_grids(&small(), vec![TokenGrid::filled((1, 1), 0)]).unwrap();
        assert!(p.step_logits(&bad).is_ok());
        let foreign =
            VarState::from_grids(&small(), vec![TokenGrid::new((1, 1), vec![3], 4).unwrap()])
                .unwrap();
        assert!(matches!(
            p.step_logits(&foreign),
            Err(VarlError::UnknownState { .. })
        ));
    }

    #[test]
    fn contextual_features_pool_last_grid() {
        let s = ScaleSchedule::new(vec![(1, 1), (2, 2), (2, 2)]).unwrap();
        let p = PolicyParams::new(s.clone(), 2, PolicyMode::Contextual).unwrap();
        let st = VarState::from_grids(
            &s,
            vec![
                TokenGrid::filled((1, 1), 1),
                TokenGrid::new((2, 2), vec![0, 1, 1, 1], 2).unwrap(),
            ],
        )
        .unwrap();
        let x = p.features(&st);
        assert_eq!(x.len(), 4 * 2 + 3);
        assert_eq!(&x[..8], &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(&x[8..], &[0.0, 0.0, 1.0]);
        let root = p.features(&VarState::root());
        assert_eq!(root[8], 1.0);
        assert!(root[..8].iter().all(|&f| f == 0.0));
    }

    #[test]
    fn artifact_round_trip() {
        let mut rng = stream(3, &[]);
        let p = PolicyParams::random(small(), 3, PolicyMode::Tabular, 0.5, &mut rng).unwrap();
        let text = serde_json::to_string(&p.to_artifact(Some(3))).unwrap();
        let back = PolicyParams::from_artifact(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
