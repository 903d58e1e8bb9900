//! OCR-style terminal reward for rendered text, a toy recognizer that reads
//! words straight off a token grid, and word-level evaluation metrics.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mdp::{Token, TokenGrid};

/// Predicted words with per-word confidences, lowercased.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Recognition {
    words: Vec<String>,
    confidences: Vec<f64>,
}

impl Recognition {
    pub fn new(words: Vec<String>, confidences: Vec<f64>) -> Result<Self> {
        if words.len() != confidences.len() {
            return Err(invalid(format!(
                "{} words but {} confidences",
                words.len(),
                confidences.len()
            )));
        }
        if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(invalid(format!("confidence {c} outside [0, 1]")));
        }
        Ok(Self {
            words: words.into_iter().map(|w| w.to_lowercase()).collect(),
            confidences,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Lowercased reference words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    words: Vec<String>,
}

impl GroundTruth {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.is_empty() || words.iter().any(|w| w.is_empty()) {
            return Err(invalid("ground truth needs at least one nonempty word"));
        }
        Ok(Self {
            words: words.into_iter().map(|w| w.to_lowercase()).collect(),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.split_whitespace().map(str::to_owned).collect())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            epsilon: 1e-6,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub comp: f64,
    pub sim: f64,
    pub pen: f64,
    pub total: f64,
    /// Index of the best-matching prediction per ground-truth word.
    pub best_match: Vec<Option<usize>>,
    pub word_accuracy: f64,
    pub ned: f64,
}

/// Unit-cost edit distance over characters.
pub fn edit_distance(x: &str, y: &str) -> usize {
    let a: Vec<char> = x.chars().collect();
    let b: Vec<char> = y.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - ED(x, y) / (max(|x|, |y|) + eps)`.
pub fn levenshtein_score(x: &str, y: &str, eps: f64) -> f64 {
    let longest = x.chars().count().max(y.chars().count());
    1.0 - edit_distance(x, y) as f64 / (longest as f64 + eps)
}

/// Mean over ground-truth words of the smallest confidence among identical
/// predictions, zero when the word is not predicted.
pub fn completeness(gt: &GroundTruth, rec: &Recognition) -> f64 {
    let n = gt.words.len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = gt
        .words
        .iter()
        .map(|g| {
            rec.words
                .iter()
                .zip(&rec.confidences)
                .filter(|(p, _)| *p == g)
                .map(|(_, &s)| s)
                .reduce(f64::min)
                .unwrap_or(0.0)
        })
        .sum();
    total / n as f64
}

fn char_counts<'a>(words: impl Iterator<Item = &'a String>) -> (BTreeMap<char, i64>, usize) {
    let mut counts = BTreeMap::new();
    let mut len = 0;
    for c in words.flat_map(|w| w.chars()) {
        *counts.entry(c).or_insert(0) += 1;
        len += 1;
    }
    (counts, len)
}

/// Size of the symmetric difference of two character multisets.
pub fn bag_distance(x: &str, y: &str) -> usize {
    let (a, _) = char_counts(std::iter::once(&x.to_owned()));
    let (b, _) = char_counts(std::iter::once(&y.to_owned()));
    bag_between(&a, &b)
}

fn bag_between(a: &BTreeMap<char, i64>, b: &BTreeMap<char, i64>) -> usize {
    let mut keys: Vec<&char> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|k| (a.get(k).unwrap_or(&0) - b.get(k).unwrap_or(&0)).unsigned_abs() as usize)
        .sum()
}

/// `λ · BagDist(concat P, concat G) / (|concat P| + |concat G|)`.
pub fn length_penalty(gt: &GroundTruth, rec: &Recognition, cfg: &RewardConfig) -> f64 {
    let (p, np) = char_counts(rec.words.iter());
    let (g, ng) = char_counts(gt.words.iter());
    if np + ng == 0 {
        return 0.0;
    }
    cfg.lambda * (bag_between(&p, &g) as f64 / (np + ng) as f64)
}

/// Best prediction for `g` by Levenshtein score; ties go to the lowest index.
fn best_match(g: &str, rec: &Recognition, eps: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in rec.words.iter().enumerate() {
        let ld = levenshtein_score(g, p, eps);
        if best.is_none_or(|(_, b)| ld > b) {
            best = Some((i, ld));
        }
    }
    best
}

/// Confidence-weighted similarity of each ground-truth word to its best
/// prediction, averaged over ground-truth words.
pub fn similarity(gt: &GroundTruth, rec: &Recognition, cfg: &RewardConfig) -> f64 {
    let n = gt.words.len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = gt
        .words
        .iter()
        .filter_map(|g| best_match(g, rec, cfg.epsilon))
        .map(|(i, ld)| ld * rec.confidences[i])
        .sum();
    total / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub word_accuracy: f64,
    pub ned: f64,
}

/// Exact-match word accuracy and mean best-match Levenshtein score.
pub fn eval_metrics(gt: &GroundTruth, rec: &Recognition) -> EvalMetrics {
    let n = gt.words.len();
    if n == 0 {
        return EvalMetrics {
            word_accuracy: 0.0,
            ned: 0.0,
        };
    }
    let exact = gt.words.iter().filter(|g| rec.words.contains(g)).count();
    let ned: f64 = gt
        .words
        .iter()
        .filter_map(|g| best_match(g, rec, RewardConfig::default().epsilon))
        .map(|(_, ld)| ld)
        .sum();
    EvalMetrics {
        word_accuracy: exact as f64 / n as f64,
        ned: ned / n as f64,
    }
}

/// Completeness plus similarity minus the length penalty.
pub fn ocr_reward(gt: &GroundTruth, rec: &Recognition, cfg: &RewardConfig) -> RewardReport {
    let comp = completeness(gt, rec);
    let sim = similarity(gt, rec, cfg);
    let pen = length_penalty(gt, rec, cfg);
    let metrics = eval_metrics(gt, rec);
    RewardReport {
        comp,
        sim,
        pen,
        total: comp + sim - pen,
        best_match: gt
            .words
            .iter()
            .map(|g| best_match(g, rec, cfg.epsilon).map(|(i, _)| i))
            .collect(),
        word_accuracy: metrics.word_accuracy,
        ned: metrics.ned,
    }
}

/// What a token id renders as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    /// Renders nothing and does not break words.
    Blank,
    /// Ends the current word.
    Delimiter,
    Char(char),
}

/// Token-to-glyph table with optional per-token confidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCodec {
    glyphs: Vec<Glyph>,
    confidences: Option<Vec<f64>>,
}

impl TokenCodec {
    pub fn new(glyphs: Vec<Glyph>, confidences: Option<Vec<f64>>) -> Result<Self> {
        if !glyphs.contains(&Glyph::Delimiter) {
            return Err(invalid("codec needs a delimiter token"));
        }
        if let Some(c) = &confidences {
            if c.len() != glyphs.len() || c.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(invalid(
                    "codec confidences must be one value in [0, 1] per token",
                ));
            }
        }
        Ok(Self {
            glyphs,
            confidences,
        })
    }

    /// Token 0 is blank, token 1 the delimiter, then one token per letter.
    pub fn toy(letters: &str) -> Self {
        let mut glyphs = vec![Glyph::Blank, Glyph::Delimiter];
        glyphs.extend(letters.chars().map(Glyph::Char));
        Self {
            glyphs,
            confidences: None,
        }
    }

    pub fn with_confidences(mut self, confidences: Vec<f64>) -> Result<Self> {
        self.confidences = Some(confidences);
        Self::new(self.glyphs, self.confidences)
    }

    pub fn vocab(&self) -> usize {
        self.glyphs.len()
    }

    pub fn glyph(&self, token: Token) -> Glyph {
        self.glyphs
            .get(token as usize)
            .copied()
            .unwrap_or(Glyph::Blank)
    }

    pub fn token_of(&self, c: char) -> Option<Token> {
        self.glyphs
            .iter()
            .position(|g| *g == Glyph::Char(c))
            .map(|i| i as Token)
    }

    fn confidence(&self, token: Token) -> f64 {
        self.confidences.as_ref().map_or(1.0, |c| c[token as usize])
    }
}

/// Reads a token sequence as words. Returns the words, their confidences
/// and, per word, the positions of the tokens that spell it.
pub fn decode_tokens(tokens: &[Token], codec: &TokenCodec) -> (Recognition, Vec<Vec<usize>>) {
    let mut words = Vec::new();
    let mut confidences = Vec::new();
    let mut positions = Vec::new();
    let mut word = String::new();
    let mut conf = Vec::new();
    let mut pos = Vec::new();
    let mut flush = |word: &mut String, conf: &mut Vec<f64>, pos: &mut Vec<usize>| {
        if !word.is_empty() {
            words.push(std::mem::take(word));
            confidences.push(conf.iter().sum::<f64>() / conf.len() as f64);
            positions.push(std::mem::take(pos));
        }
        conf.clear();
        pos.clear();
    };
    for (i, &t) in tokens.iter().enumerate() {
        match codec.glyph(t) {
            Glyph::Blank => {}
            Glyph::Delimiter => flush(&mut word, &mut conf, &mut pos),
            Glyph::Char(c) => {
                word.extend(c.to_lowercase());
                conf.push(codec.confidence(t));
                pos.push(i);
            }
        }
    }
    flush(&mut word, &mut conf, &mut pos);
    let rec = Recognition { words, confidences };
    (rec, positions)
}

/// Reads a grid row-major.
pub fn toy_recognize(grid: &TokenGrid, codec: &TokenCodec) -> Recognition {
    decode_tokens(grid.tokens(), codec).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreRecord {
    gt: Vec<String>,
    pred: Vec<String>,
    conf: Vec<f64>,
}

/// Scores JSON-lines records `{gt, pred, conf}`, writing one report per
/// line. Blank lines are skipped. Returns the number of records scored.
pub fn score_jsonl(
    input: impl BufRead,
    mut output: impl Write,
    cfg: &RewardConfig,
) -> Result<usize> {
    cfg.validate()?;
    let mut n = 0;
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord = serde_json::from_str(&line)
            .map_err(|e| invalid(format!("line {}: {e}", lineno + 1)))?;
        let gt =
            GroundTruth::new(rec.gt).map_err(|e| invalid(format!("line {}: {e}", lineno + 1)))?;
        let pred = Recognition::new(rec.pred, rec.conf)
            .map_err(|e| invalid(format!("line {}: {e}", lineno + 1)))?;
        serde_json::to_writer(&mut output, &ocr_reward(&gt, &pred, cfg))?;
        writeln!(output)?;
        n += 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(words: &[&str]) -> GroundTruth {
        GroundTruth::new(words.iter().map(|w| w.to_string()).collect()).unwrap()
    }

    fn rec(words: &[&str], conf: &[f64]) -> Recognition {
        Recognition::new(words.iter().map(|w| w.to_string()).collect(), conf.to_vec()).unwrap()
    }

    #[test]
    fn levenshtein_examples() {
        assert!((levenshtein_score("cat", "cat", 1e-6) - 1.0).abs() < 1e-6);
        assert!(
            (levenshtein_score("kitten", "sitting", 1e-6) - (1.0 - 3.0 / (7.0 + 1e-6))).abs()
                < 1e-12
        );
        assert!(levenshtein_score("", "abc", 1e-6).abs() < 1e-6);
        assert_eq!(edit_distance("", ""), 0);
    }

    #[test]
    fn completeness_examples() {
        assert!((completeness(&gt(&["a"]), &rec(&["a", "a"], &[0.9, 0.7])) - 0.7).abs() < 1e-12);
        assert!((completeness(&gt(&["a", "b"]), &rec(&["a"], &[1.0])) - 0.5).abs() < 1e-12);
        assert_eq!(completeness(&gt(&["x"]), &rec(&[], &[])), 0.0);
    }

    #[test]
    fn penalty_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(
            length_penalty(&gt(&["ab"]), &rec(&["ba"], &[1.0]), &cfg),
            0.0
        );
        assert!((length_penalty(&gt(&["abcd"]), &rec(&["ab"], &[1.0]), &cfg) - 0.2).abs() < 1e-12);
        assert!((length_penalty(&gt(&["ab"]), &rec(&[], &[]), &cfg) - 0.6).abs() < 1e-12);
        assert_eq!(bag_distance("aab", "abc"), 2);
    }

    #[test]
    fn similarity_examples() {
        let cfg = RewardConfig::default();
        assert!((similarity(&gt(&["cat"]), &rec(&["cat"], &[1.0]), &cfg) - 1.0).abs() < 1e-6);
        let r = rec(&["vote", "note"], &[0.8, 0.9]);
        assert!((similarity(&gt(&["vote"]), &r, &cfg) - 0.8).abs() < 1e-6);
        assert_eq!(
            ocr_reward(&gt(&["vote"]), &r, &cfg).best_match,
            vec![Some(0)]
        );
        assert!(similarity(&gt(&["ab"]), &rec(&["cd"], &[1.0]), &cfg).abs() < 1e-6);
    }

    #[test]
    fn reward_examples() {
        let cfg = RewardConfig::default();
        let perfect = ocr_reward(
            &gt(&["cat", "dog"]),
            &rec(&["cat", "dog"], &[1.0, 1.0]),
            &cfg,
        );
        assert!((perfect.total - 2.0).abs() < 1e-5);
        assert_eq!((perfect.word_accuracy, perfect.pen), (1.0, 0.0));
        let empty = ocr_reward(&gt(&["cat"]), &rec(&[], &[]), &cfg);
        assert!((empty.total + 0.6).abs() < 1e-12);
        assert_eq!((empty.word_accuracy, empty.ned), (0.0, 0.0));
        let half = eval_metrics(&gt(&["cat", "dog"]), &rec(&["cat"], &[1.0]));
        assert_eq!(half.word_accuracy, 0.5);
    }

    #[test]
    fn recognizer_examples() {
        let codec = TokenCodec::toy("act");
        let c = codec.token_of('c').unwrap();
        let a = codec.token_of('a').unwrap();
        let t = codec.token_of('t').unwrap();
        let grid = TokenGrid::new((2, 2), vec![c, a, t, 1], 5).unwrap();
        let r = toy_recognize(&grid, &codec);
        assert_eq!(r.words(), &["cat".to_string()]);
        assert_eq!(r.confidences(), &[1.0]);
        assert!(toy_recognize(&TokenGrid::filled((2, 2), 1), &codec).is_empty());
        let half = codec.with_confidences(vec![0.5; 5]).unwrap();
        assert_eq!(toy_recognize(&grid, &half).confidences(), &[0.5]);
    }

    #[test]
    fn blanks_join_and_delimiters_split() {
        let codec = TokenCodec::toy("ab");
        let (r, pos) = decode_tokens(&[2, 0, 3, 1, 1, 3], &codec);
        assert_eq!(r.words(), &["ab".to_string(), "b".to_string()]);
        assert_eq!(pos, vec![vec![0, 2], vec![5]]);
    }

    #[test]
    fn jsonl_batch() {
        let input = "{\"gt\":[\"Cat\"],\"pred\":[\"cat\"],\"conf\":[1.0]}\n\n{\"gt\":[\"a\"],\"pred\":[],\"conf\":[]}\n";
        let mut out = Vec::new();
        let n = score_jsonl(input.as_bytes(), &mut out, &RewardConfig::default()).unwrap();
        assert_eq!(n, 2);
        let lines: Vec<RewardReport> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert!((lines[0].total - 2.0).abs() < 1e-5);
        assert!((lines[1].total + 0.6).abs() < 1e-12);
        assert!(score_jsonl(
            "{\"gt\":[]}".as_bytes(),
            Vec::new(),
            &RewardConfig::default()
        )
        .is_err());
    }
}
