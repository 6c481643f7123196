//! Beam search and greedy decoding over any next-token distribution.
//!
//! Scores are summed log-probabilities with no length normalization
//! (optionally the mean per token). A hypothesis still open after
//! `max_len` steps is closed with a forced EOS that adds no score.

use kgdialog_nn::argmax;

use crate::error::{Error, Result};

/// Next-token log-probabilities after a prefix (BOS excluded).
pub trait StepScorer {
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
    fn eos(&self) -> u32;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Tokens without the EOS.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// False when closed by the length limit.
    pub finished: bool,
}

impl Hypothesis {
    fn rank_score(&self, normalize: bool) -> f64 {
        if normalize {
            self.log_prob / (self.tokens.len() + usize::from(self.finished)) as f64
        } else {
            self.log_prob
        }
    }
}

pub fn greedy_decode(scorer: &dyn StepScorer, max_len: usize) -> Result<Hypothesis> {
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = scorer.log_probs(&tokens)?;
        let tok = argmax(&lp).ok_or_else(|| Error::Invalid("empty distribution".into()))?;
        log_prob += lp[tok];
        if tok as u32 == scorer.eos() {
            return Ok(Hypothesis { tokens, log_prob, finished: true });
        }
        tokens.push(tok as u32);
    }
    Ok(Hypothesis { tokens, log_prob, finished: false })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by mean log-probability per token.
    pub length_normalize: bool,
}

/// Keeps the `beam_size` best expansions per step (ties: higher step
/// log-prob, then earlier beam, then lower token id). Finished hypotheses
/// leave the beam; search stops when `beam_size` have finished, when no
/// open hypothesis can still beat the best finished one, or at `max_len`.
/// The greedy path is always a candidate, so the result never scores below
/// greedy decoding; ties go to the hypothesis that finished first.
pub fn beam_decode(scorer: &dyn StepScorer, cfg: BeamConfig) -> Result<Hypothesis> {
    if cfg.beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    let eos = scorer.eos();
    let mut live = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        // (cumulative, step log-prob, beam, token)
        let mut cands: Vec<(f64, f64, usize, u32)> = Vec::new();
        for (b, h) in live.iter().enumerate() {
            for (t, &lp) in scorer.log_probs(&h.tokens)?.iter().enumerate() {
                cands.push((h.log_prob + lp, lp, b, t as u32));
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(y.1.total_cmp(&x.1)).then(x.2.cmp(&y.2)).then(x.3.cmp(&y.3)));
        let mut next = Vec::with_capacity(cfg.beam_size);
        for &(score, _, b, t) in cands.iter().take(cfg.beam_size) {
            let mut tokens = live[b].tokens.clone();
            if t == eos {
                finished.push(Hypothesis { tokens, log_prob: score, finished: true });
            } else {
                tokens.push(t);
                next.push(Hypothesis { tokens, log_prob: score, finished: false });
            }
        }
        live = next;
        if live.is_empty() || finished.len() >= cfg.beam_size {
            break;
        }
        if !cfg.length_normalize {
            let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            let best_open = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_open {
                break;
            }
        }
    }
    finished.extend(live.into_iter().filter(|h| h.tokens.len() >= cfg.max_len));
    finished.push(greedy_decode(scorer, cfg.max_len)?);
    let mut best = 0;
    for (i, h) in finished.iter().enumerate() {
        if h.rank_score(cfg.length_normalize) > finished[best].rank_score(cfg.length_normalize) {
            best = i;
        }
    }
    Ok(finished.swap_remove(best))
}
