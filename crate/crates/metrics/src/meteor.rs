//! METEOR with exact and stem matching stages (no synonym or paraphrase
//! tables — those need external lexical resources). Sentence scores are
//! averaged into the corpus score.

use crate::error::{MetricError, Result};
use crate::text::{stem, tokenize};

const ALPHA: f64 = 0.9;
const GAMMA: f64 = 0.5;
const BETA: f64 = 3.0;

/// Greedy leftmost unigram alignment: every candidate token in order claims
/// the leftmost unclaimed reference token it matches, exact matches first,
/// then stem matches among the leftovers. Returns (cand_idx, ref_idx) pairs
/// ordered by candidate position.
fn align(cand: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut ref_taken = vec![false; reference.len()];
    let mut matched: Vec<Option<usize>> = vec![None; cand.len()];
    for (i, tok) in cand.iter().enumerate() {
        if let Some(j) = reference
            .iter()
            .enumerate()
            .position(|(j, r)| !ref_taken[j] && r == tok)
        {
            ref_taken[j] = true;
            matched[i] = Some(j);
        }
    }
    for (i, tok) in cand.iter().enumerate() {
        if matched[i].is_some() {
            continue;
        }
        let st = stem(tok);
        if let Some(j) = reference
            .iter()
            .enumerate()
            .position(|(j, r)| !ref_taken[j] && stem(r) == st)
        {
            ref_taken[j] = true;
            matched[i] = Some(j);
        }
    }
    matched
        .into_iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| (i, j)))
        .collect()
}

/// Count maximal runs of matches that are consecutive in both sentences.
fn chunk_count(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

pub fn meteor_sentence(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let pairs = align(&c, &r);
    if pairs.is_empty() {
        return 0.0;
    }
    let m = pairs.len() as f64;
    let precision = m / c.len() as f64;
    let recall = m / r.len() as f64;
    let f_mean = precision * recall / (ALPHA * precision + (1.0 - ALPHA) * recall);
    let penalty = GAMMA * (chunk_count(&pairs) as f64 / m).powf(BETA);
    100.0 * f_mean * (1.0 - penalty)
}

pub fn meteor(candidates: &[String], references: &[String]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            cands: candidates.len(),
            refs: references.len(),
        });
    }
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| meteor_sentence(c, r))
        .sum();
    Ok(sum / candidates.len() as f64)
}
