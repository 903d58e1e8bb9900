//! The deterministic token-pyramid MDP.
//!
//! A state is the sequence of token grids generated so far; an action is the
//! next grid. The root state holds no grids, so a schedule of `L` shapes
//! gives `L` actions and a terminal state with `L` grids.

mod policy;
mod sampler;
mod trajectory;

pub use policy::{
    tabular_state_count, BlockKey, BlockRecord, ParamBlocks, ParamsArtifact, PolicyMode,
    PolicyParams, DEFAULT_STATE_BOUND,
};
pub use sampler::{sample_action, truncate_distribution, SampledAction, SamplerConfig};
pub use trajectory::{rollout, trajectory_logprob, Trajectory};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VarlError};
use crate::schedule::{ScaleSchedule, Shape};

pub type Token = u32;

/// Terminal reward of a completed pyramid.
pub trait TerminalReward: Send + Sync {
    fn terminal_reward(&self, state: &VarState) -> Result<f64>;
}

impl<F> TerminalReward for F
where
    F: Fn(&VarState) -> f64 + Send + Sync,
{
    fn terminal_reward(&self, state: &VarState) -> Result<f64> {
        Ok(self(state))
    }
}

/// One grid of token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    shape: Shape,
    tokens: Vec<Token>,
}

impl TokenGrid {
    pub fn new(shape: Shape, tokens: Vec<Token>, vocab: usize) -> Result<Self> {
        if tokens.len() != shape.0 * shape.1 {
            return Err(VarlError::ShapeMismatch(format!(
                "grid {:?} needs {} tokens, got {}",
                shape,
                shape.0 * shape.1,
                tokens.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(VarlError::ShapeMismatch(format!(
                "token id {t} outside vocabulary of size {vocab}"
            )));
        }
        Ok(Self { shape, tokens })
    }

    pub fn filled(shape: Shape, token: Token) -> Self {
        Self {
            shape,
            tokens: vec![token; shape.0 * shape.1],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn get(&self, i: usize, j: usize) -> Token {
        self.tokens[i * self.shape.1 + j]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A partial pyramid `(r_1, ..., r_t)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct VarState {
    grids: Vec<TokenGrid>,
}

impl VarState {
    pub fn root() -> Self {
        Self::default()
    }

    /// Builds a state from grids, checking them against the schedule.
    pub fn from_grids(schedule: &ScaleSchedule, grids: Vec<TokenGrid>) -> Result<Self> {
        if grids.len() > schedule.len() {
            return Err(VarlError::ShapeMismatch(format!(
                "{} grids exceed a schedule of {} steps",
                grids.len(),
                schedule.len()
            )));
        }
        for (t, g) in grids.iter().enumerate() {
            if g.shape() != schedule.shape(t) {
                return Err(VarlError::ShapeMismatch(format!(
                    "grid {t} has shape {:?}, schedule expects {:?}",
                    g.shape(),
                    schedule.shape(t)
                )));
            }
        }
        Ok(Self { grids })
    }

    /// Number of grids generated so far.
    pub fn step(&self) -> usize {
        self.grids.len()
    }

    pub fn grids(&self) -> &[TokenGrid] {
        &self.grids
    }

    pub fn last_grid(&self) -> Option<&TokenGrid> {
        self.grids.last()
    }

    pub fn is_terminal(&self, schedule: &ScaleSchedule) -> bool {
        self.step() == schedule.len()
    }

    /// Appends `action` as the next grid. The input state is left untouched.
    pub fn transition(&self, schedule: &ScaleSchedule, action: &TokenGrid) -> Result<VarState> {
        let mut next = self.clone();
        next.push(schedule, action.clone())?;
        Ok(next)
    }

    pub(crate) fn push(&mut self, schedule: &ScaleSchedule, action: TokenGrid) -> Result<()> {
        let step = self.step();
        if step >= schedule.len() {
            return Err(VarlError::ShapeMismatch(format!(
                "state at step {step} is terminal for a {}-step schedule",
                schedule.len()
            )));
        }
        if action.shape() != schedule.shape(step) {
            return Err(VarlError::ShapeMismatch(format!(
                "action shape {:?} does not match scheduled {:?}",
                action.shape(),
                schedule.shape(step)
            )));
        }
        self.grids.push(action);
        Ok(())
    }

    /// Truncates to the first `step` grids.
    pub fn prefix(&self, step: usize) -> VarState {
        VarState {
            grids: self.grids[..step.min(self.grids.len())].to_vec(),
        }
    }

    /// Canonical integer code of the tokens so far, read in generation order
    /// as base-`vocab` digits (first token most significant). `None` on
    /// overflow.
    pub fn code(&self, vocab: usize) -> Option<u64> {
        let v = vocab as u64;
        self.grids
            .iter()
            .flat_map(|g| g.tokens.iter())
            .try_fold(0u64, |acc, &t| acc.checked_mul(v)?.checked_add(t as u64))
    }
}

/// Free-function form of [`VarState::transition`].
pub fn transition(
    schedule: &ScaleSchedule,
    state: &VarState,
    action: &TokenGrid,
) -> Result<VarState> {
    state.transition(schedule, action)
}

/// Decodes a base-`vocab` action code into a grid (first site most significant).
pub fn grid_from_code(shape: Shape, mut code: u64, vocab: usize) -> TokenGrid {
    let n = shape.0 * shape.1;
    let mut tokens = vec![0; n];
    for slot in tokens.iter_mut().rev() {
        *slot = (code % vocab as u64) as Token;
        code /= vocab as u64;
    }
    TokenGrid { shape, tokens }
}

/// Inverse of [`grid_from_code`].
pub fn grid_code(grid: &TokenGrid, vocab: usize) -> u64 {
    grid.tokens
        .iter()
        .fold(0u64, |acc, &t| acc * vocab as u64 + t as u64)
}
