//! CIDEr: cosine similarity between tf-idf weighted n-gram vectors,
//! averaged over n = 1..4 and over the corpus.
//!
//! Scale convention: the mean cosine is multiplied by 1000, so a corpus
//! where every candidate equals its reference and no n-gram repeats across
//! references scores exactly 1000. The convention is stamped into report
//! metadata because published scores of this metric do not state theirs.

use std::collections::BTreeMap;

use crate::error::{MetricError, Result};
use crate::text::{ngram_counts, tokenize};

pub const CIDER_SCALE: f64 = 1000.0;

/// idf over the reference corpus: ln(R / max(1, df)).
fn idf_table(ref_grams: &[BTreeMap<String, usize>]) -> BTreeMap<String, f64> {
    let r = ref_grams.len() as f64;
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for sent in ref_grams {
        for gram in sent.keys() {
            *df.entry(gram.clone()).or_insert(0) += 1;
        }
    }
    df.into_iter()
        .map(|(g, d)| (g, (r / 1.0_f64.max(d as f64)).ln()))
        .collect()
}

/// tf-idf vector for one sentence: relative n-gram frequency × idf.
/// Grams unseen in the reference corpus get idf ln(R) (df clamped to 1).
fn tfidf(
    grams: &BTreeMap<String, usize>,
    idf: &BTreeMap<String, f64>,
    r_count: f64,
) -> BTreeMap<String, f64> {
    let total: usize = grams.values().sum();
    if total == 0 {
        return BTreeMap::new();
    }
    grams
        .iter()
        .map(|(g, &c)| {
            let w = idf.get(g).copied().unwrap_or_else(|| r_count.ln());
            (g.clone(), c as f64 / total as f64 * w)
        })
        .collect()
}

fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(g, &wa)| b.get(g).map(|&wb| wa * wb))
        .sum();
    let na: f64 = a.values().map(|w| w * w).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|w| w * w).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn cider(candidates: &[String], references: &[String]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            cands: candidates.len(),
            refs: references.len(),
        });
    }
    let ref_toks: Vec<Vec<String>> = references.iter().map(|s| tokenize(s)).collect();
    let distinct = {
        let mut seen: Vec<&Vec<String>> = Vec::new();
        for t in &ref_toks {
            if !seen.contains(&t) {
                seen.push(t);
            }
        }
        seen.len()
    };
    if distinct < 2 {
        return Err(MetricError::DegenerateIdf { distinct });
    }
    let cand_toks: Vec<Vec<String>> = candidates.iter().map(|s| tokenize(s)).collect();
    let r_count = references.len() as f64;

    let mut mean_over_n = 0.0;
    for n in 1..=4usize {
        let ref_grams: Vec<BTreeMap<String, usize>> =
            ref_toks.iter().map(|t| ngram_counts(t, n)).collect();
        let idf = idf_table(&ref_grams);
        let mut pair_sum = 0.0;
        for (c, rg) in cand_toks.iter().zip(&ref_grams) {
            let cv = tfidf(&ngram_counts(c, n), &idf, r_count);
            let rv = tfidf(rg, &idf, r_count);
            pair_sum += cosine(&cv, &rv);
        }
        mean_over_n += pair_sum / candidates.len() as f64;
    }
    Ok(CIDER_SCALE * mean_over_n / 4.0)
}
