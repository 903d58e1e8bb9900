use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PolicyParams, Token, TokenGrid, VarState};
use crate::error::Result;
use crate::math::softmax;

/// Rollout sampling settings.
///
/// With `truncation` on, each site's distribution is cut to its `top_k`
/// most likely tokens and then to the smallest prefix reaching `top_p`
/// cumulative mass before drawing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub truncation: bool,
    pub top_k: usize,
    pub top_p: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            truncation: false,
            top_k: 2,
            top_p: 0.9,
        }
    }
}

impl SamplerConfig {
    pub fn truncated(top_k: usize, top_p: f64) -> Self {
        Self {
            truncation: true,
            top_k,
            top_p,
        }
    }
}

/// Top-k then top-p truncation, renormalized. Ties in probability keep the
/// lower token id first.
pub fn truncate_distribution(probs: &[f64], top_k: usize, top_p: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let k = top_k.clamp(1, probs.len());
    let kept = &order[..k];
    let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
    let mut cum = 0.0;
    let mut n = 0;
    for &i in kept {
        cum += probs[i] / mass;
        n += 1;
        if cum >= top_p {
            break;
        }
    }
    let kept = &kept[..n];
    let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in kept {
        out[i] = probs[i] / mass;
    }
    out
}

fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = i;
            if u < cum {
                return i;
            }
        }
    }
    last
}

/// A sampled action grid with per-site log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    pub grid: TokenGrid,
    /// Log-probabilities under the untruncated softmax; these feed training.
    pub log_probs: Vec<f64>,
    /// Log-probabilities under the distribution actually sampled from.
    pub sampled_log_probs: Vec<f64>,
}

impl SampledAction {
    /// Mean absolute gap between the training and sampling log-probs.
    pub fn truncation_gap(&self) -> f64 {
        let n = self.log_probs.len().max(1) as f64;
        self.log_probs
            .iter()
            .zip(&self.sampled_log_probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }
}

/// Draws the next grid, each site independently.
pub fn sample_action(
    params: &PolicyParams,
    state: &VarState,
    sampler: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<SampledAction> {
    let logits = params.step_logits(state)?;
    let shape = params.schedule().shape(state.step());
    let v = params.vocab();
    let sites = shape.0 * shape.1;
    let mut tokens = Vec::with_capacity(sites);
    let mut log_probs = Vec::with_capacity(sites);
    let mut sampled_log_probs = Vec::with_capacity(sites);
    for site in 0..sites {
        let probs = softmax(&logits[site * v..(site + 1) * v]);
        let (tok, lp_sampled) = if sampler.truncation {
            let cut = truncate_distribution(&probs, sampler.top_k, sampler.top_p);
            let tok = draw(&cut, rng);
            (tok, cut[tok].ln())
        } else {
            let tok = draw(&probs, rng);
            (tok, probs[tok].ln())
        };
        tokens.push(tok as Token);
        log_probs.push(probs[tok].ln());
        sampled_log_probs.push(lp_sampled);
    }
    let grid = TokenGrid::new(shape, tokens, v)?;
    Ok(SampledAction {
        grid,
        log_probs,
        sampled_log_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::PolicyMode;
    use crate::rng::stream;
    use crate::schedule::ScaleSchedule;

    #[test]
    fn top_k_support() {
        let cut = truncate_distribution(&[0.4, 0.3, 0.2, 0.1], 2, 1.0);
        assert_eq!(cut[2], 0.0);
        assert_eq!(cut[3], 0.0);
        assert!((cut[0] - 0.4 / 0.7).abs() < 1e-12);
        let cut = truncate_distribution(&[0.4, 0.3, 0.2, 0.1], 4, 0.5);
        assert_eq!(cut, vec![0.4 / 0.7, 0.3 / 0.7, 0.0, 0.0]);
    }

    #[test]
    fn dominant_logit_always_drawn() {
        let s = ScaleSchedule::new(vec![(2, 2)]).unwrap();
        let mut p = PolicyParams::new(s, 4, PolicyMode::Tabular).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                p.set_site_logits(&VarState::root(), (i, j), &[0.0, 0.0, 60.0, 0.0])
                    .unwrap();
            }
        }
        let mut rng = stream(1, &[]);
        for _ in 0..200 {
            let a =
                sample_action(&p, &VarState::root(), &SamplerConfig::default(), &mut rng).unwrap();
            assert!(a.grid.tokens().iter().all(|&t| t == 2));
        }
    }

    #[test]
    fn truncated_sampling_stays_in_support() {
        let s = ScaleSchedule::new(vec![(1, 1)]).unwrap();
        let mut p = PolicyParams::new(s, 4, PolicyMode::Tabular).unwrap();
        let logits: Vec<f64> = [0.4f64, 0.3, 0.2, 0.1].iter().map(|x| x.ln()).collect();
        p.set_site_logits(&VarState::root(), (0, 0), &logits)
            .unwrap();
        let cfg = SamplerConfig::truncated(2, 1.0);
        let mut rng = stream(2, &[]);
        let mut gap = 0.0;
        for _ in 0..500 {
            let a = sample_action(&p, &VarState::root(), &cfg, &mut rng).unwrap();
            assert!(a.grid.tokens()[0] <= 1);
            gap += a.truncation_gap();
        }
        assert!(gap > 0.0);
    }

    #[test]
    fn seeded_sampling_repeats() {
        let s = ScaleSchedule::new(vec![(3, 3)]).unwrap();
        let p = PolicyParams::random(s, 5, PolicyMode::Tabular, 1.0, &mut stream(0, &[])).unwrap();
        let a = sample_action(
            &p,
            &VarState::root(),
            &SamplerConfig::default(),
            &mut stream(9, &[]),
        )
        .unwrap();
        let b = sample_action(
            &p,
            &VarState::root(),
            &SamplerConfig::default(),
            &mut stream(9, &[]),
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
