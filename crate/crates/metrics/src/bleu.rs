//! Corpus BLEU: clipped modified n-gram precision, geometric mean over
//! orders 1..=n, multiplied by the brevity penalty.

use crate::error::{MetricError, Result};
use crate::text::{ngram_counts, tokenize};

/// Corpus-level BLEU-n as a percentage. A zero clipped count at any order
/// (or an empty candidate corpus) scores 0 — no smoothing.
pub fn bleu(candidates: &[String], references: &[String], max_n: usize) -> Result<f64> {
    if max_n == 0 {
        return Err(MetricError::BadOrder);
    }
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            cands: candidates.len(),
            refs: references.len(),
        });
    }
    let cand_toks: Vec<Vec<String>> = candidates.iter().map(|s| tokenize(s)).collect();
    let ref_toks: Vec<Vec<String>> = references.iter().map(|s| tokenize(s)).collect();
    let cand_total: usize = cand_toks.iter().map(Vec::len).sum();
    let ref_total: usize = ref_toks.iter().map(Vec::len).sum();
    if cand_total == 0 {
        return Ok(0.0);
    }

    let mut log_precision_sum = 0.0;
    for n in 1..=max_n {
        let mut clipped = 0usize;
        let mut total = 0usize;
        for (c, r) in cand_toks.iter().zip(&ref_toks) {
            let cg = ngram_counts(c, n);
            let rg = ngram_counts(r, n);
            total += cg.values().sum::<usize>();
            for (gram, &count) in &cg {
                clipped += count.min(rg.get(gram).copied().unwrap_or(0));
            }
        }
        if clipped == 0 || total == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (clipped as f64 / total as f64).ln();
    }

    let brevity = if cand_total > ref_total {
        1.0
    } else {
        (1.0 - ref_total as f64 / cand_total as f64).exp()
    };
    Ok(100.0 * brevity * (log_precision_sum / max_n as f64).exp())
}
