use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grpo::Task;
use crate::maskprop::{cell_of, seed_mask, Mask};
use crate::mdp::{Token, VarState};
use crate::schedule::ScaleSchedule;
use crate::textreward::{
    decode_tokens, ocr_reward, GroundTruth, RewardConfig, RewardReport, TokenCodec,
};

/// How the finest canvas is formed from the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Compose {
    /// Only the finest grid is read.
    Last,
    /// Each finest site reads the sum, modulo the vocabulary, of the tokens
    /// covering it at every scale.
    Residual,
}

/// A toy text-rendering task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub description: String,
    pub schedule: ScaleSchedule,
    /// Letter glyphs; token 0 is blank and token 1 the word delimiter.
    pub letters: String,
    pub ground_truth: Vec<String>,
    pub reward: RewardConfig,
    pub compose: Compose,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self::spell()
    }
}

impl TaskSpec {
    /// Spell one three-letter word on a 4x4 canvas from six letters.
    pub fn spell() -> Self {
        Self {
            name: "spell".into(),
            description: "write the word 'cat' on a 4x4 canvas; 6 letters, blank and delimiter"
                .into(),
            schedule: ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)]).expect("static schedule"),
            letters: "acenot".into(),
            ground_truth: vec!["cat".into()],
            reward: RewardConfig::default(),
            compose: Compose::Last,
        }
    }

    pub fn vocab(&self) -> usize {
        self.letters.chars().count() + 2
    }

    pub fn build(&self) -> Result<TextTask> {
        self.reward.validate()?;
        let codec = TokenCodec::toy(&self.letters);
        let gt = GroundTruth::new(self.ground_truth.clone())?;
        let distinct: BTreeSet<char> = self.letters.chars().collect();
        if distinct.len() != self.letters.chars().count() {
            return Err(invalid("task letters must be distinct"));
        }
        for w in gt.words() {
            if let Some(c) = w.chars().find(|c| codec.token_of(*c).is_none()) {
                return Err(invalid(format!(
                    "ground-truth character {c:?} is not in the codec"
                )));
            }
        }
        Ok(TextTask {
            spec: self.clone(),
            codec,
            gt,
        })
    }
}

/// A built text task: decodes the canvas and scores it.
#[derive(Debug, Clone)]
pub struct TextTask {
    spec: TaskSpec,
    codec: TokenCodec,
    gt: GroundTruth,
}

impl TextTask {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn codec(&self) -> &TokenCodec {
        &self.codec
    }

    pub fn ground_truth(&self) -> &GroundTruth {
        &self.gt
    }

    /// Largest attainable reward: every word spelled with full confidence.
    pub fn max_reward(&self) -> f64 {
        2.0
    }

    /// Finest canvas, row-major.
    pub fn canvas(&self, terminal: &VarState) -> Vec<Token> {
        let s = &self.spec.schedule;
        let fine = s.finest();
        let last = terminal.grids().last().expect("terminal state has grids");
        match self.spec.compose {
            Compose::Last => last.tokens().to_vec(),
            Compose::Residual => {
                let v = self.spec.vocab() as u32;
                let mut out = Vec::with_capacity(fine.0 * fine.1);
                for a in 0..fine.0 {
                    for b in 0..fine.1 {
                        let sum: u32 = terminal
                            .grids()
                            .iter()
                            .map(|g| {
                                let (i, j) = cell_of(fine, g.shape(), a, b);
                                g.get(i, j)
                            })
                            .sum();
                        out.push(sum % v);
                    }
                }
                out
            }
        }
    }

    pub fn score(&self, terminal: &VarState) -> RewardReport {
        let (rec, _) = decode_tokens(&self.canvas(terminal), &self.codec);
        ocr_reward(&self.gt, &rec, &self.spec.reward)
    }
}

impl Task for TextTask {
    fn schedule(&self) -> &ScaleSchedule {
        &self.spec.schedule
    }

    fn vocab(&self) -> usize {
        self.spec.vocab()
    }

    fn reward(&self, terminal: &VarState) -> Result<f64> {
        Ok(self.score(terminal).total)
    }

    /// Canvas cells holding a character of some ground-truth word.
    fn relevance(&self, terminal: &VarState) -> Result<Option<Mask>> {
        let fine = self.spec.schedule.finest();
        let wanted: BTreeSet<char> = self.gt.words().iter().flat_map(|w| w.chars()).collect();
        let canvas = self.canvas(terminal);
        let cells: Vec<(usize, usize)> = canvas
            .iter()
            .enumerate()
            .filter(|(_, &t)| matches!(self.codec.glyph(t), crate::textreward::Glyph::Char(c) if wanted.contains(&c)))
            .map(|(i, _)| (i / fine.1, i % fine.1))
            .collect();
        seed_mask(fine, &cells).map(Some)
    }
}
