use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numcore::Tensor;

/// A decoded token sequence (begin token excluded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Emitted tokens, ending with the end token unless `forced`.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities.
    pub log_prob: f64,
    /// `log_prob / len^alpha`.
    pub score: f64,
    /// Stopped at the length limit without emitting the end token.
    pub forced: bool,
}

impl Hypothesis {
    fn new(tokens: Vec<usize>, log_prob: f64, alpha: f64, forced: bool) -> Self {
        let score = length_normalized(log_prob, tokens.len(), alpha);
        Hypothesis { tokens, log_prob, score, forced }
    }

    /// Tokens with the end marker removed.
    pub fn content(&self, eos: usize) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == eos && !self.forced => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

pub fn length_normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        log_prob
    } else {
        log_prob / (len.max(1) as f64).powf(alpha)
    }
}

/// Higher score first; ties go to the lexicographically smaller sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

fn check(model: &Model, beam: usize, alpha: f64) -> Result<()> {
    if !model.has_decoder() {
        return Err(Error::InvalidArgument("model has no sequence decoder".into()));
    }
    if beam == 0 || !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("beam must be >= 1 and alpha >= 0 (got {beam}, {alpha})")));
    }
    Ok(())
}

/// Tokens the decoder may emit: units and the end token.
fn emittable(model: &Model) -> Vec<usize> {
    let mut v: Vec<usize> = (0..model.config.n_units).collect();
    v.push(model.eos());
    v
}

/// Pick the most probable emittable token at every step.
pub fn greedy_decode(model: &Model, encoder: &Tensor, max_len: usize) -> Result<Hypothesis> {
    check(model, 1, 0.0)?;
    let allowed = emittable(model);
    let mut prefix = vec![model.bos()];
    let mut log_prob = 0.0;
    while prefix.len() <= max_len {
        let lp = model.next_token_log_probs(encoder, &[&prefix])?.remove(0);
        let mut best = allowed[0];
        for &t in &allowed[1..] {
            if lp[t] > lp[best] || (lp[t] == lp[best] && t < best) {
                best = t;
            }
        }
        log_prob += lp[best];
        prefix.push(best);
        if best == model.eos() {
            return Ok(Hypothesis::new(prefix[1..].to_vec(), log_prob, 0.0, false));
        }
    }
    Ok(Hypothesis::new(prefix[1..].to_vec(), log_prob, 0.0, true))
}

/// Every hypothesis that left the beam (finished or cut at `max_len`),
/// best first under the length-normalized score.
pub fn beam_search_all(model: &Model, encoder: &Tensor, beam: usize, alpha: f64, max_len: usize) -> Result<Vec<Hypothesis>> {
    check(model, beam, alpha)?;
    let allowed = emittable(model);
    let eos = model.eos();
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![model.bos()], 0.0)];
    let mut done = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<&[usize]> = live.iter().map(|(p, _)| p.as_slice()).collect();
        let lps = model.next_token_log_probs(encoder, &prefixes)?;
        let mut candidates: Vec<(Vec<usize>, f64)> = Vec::with_capacity(live.len() * allowed.len());
        for ((prefix, score), lp) in live.iter().zip(&lps) {
            for &t in &allowed {
                let mut next = prefix.clone();
                next.push(t);
                candidates.push((next, score + lp[t]));
            }
        }
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        candidates.truncate(beam);
        live = Vec::with_capacity(beam);
        for (tokens, lp) in candidates {
            if tokens.last() == Some(&eos) {
                done.push(Hypothesis::new(tokens[1..].to_vec(), lp, alpha, false));
            } else {
                live.push((tokens, lp));
            }
        }
    }
    done.extend(live.into_iter().map(|(tokens, lp)| Hypothesis::new(tokens[1..].to_vec(), lp, alpha, true)));
    done.sort_by(rank);
    Ok(done)
}

/// Best hypothesis of a beam search with length weight `alpha`.
pub fn beam_search(model: &Model, encoder: &Tensor, beam: usize, alpha: f64, max_len: usize) -> Result<Hypothesis> {
    beam_search_all(model, encoder, beam, alpha, max_len)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidArgument("max_len must be at least 1".into()))
}
