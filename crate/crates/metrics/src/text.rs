//! Shared text normalization for the caption metrics.

use std::collections::BTreeMap;

/// Lowercase, whitespace-split, strip non-alphanumeric characters from
/// token edges ("car," and "Car" both become "car").
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Light suffix stemmer used by the METEOR stem stage: strips one of
/// ing/ed/es (undoubling a trailing doubled consonant other than l/s/z,
/// so "stopping" and "stops" agree on "stop"), or a single trailing s
/// (but never ss), whenever at least three characters remain.
pub fn stem(w: &str) -> String {
    for suf in ["ing", "ed", "es"] {
        if w.len() >= suf.len() + 3 && w.ends_with(suf) {
            let mut base = w[..w.len() - suf.len()].to_string();
            let chars: Vec<char> = base.chars().collect();
            if chars.len() >= 2
                && chars[chars.len() - 1] == chars[chars.len() - 2]
                && !matches!(chars[chars.len() - 1], 'l' | 's' | 'z')
            {
                base.pop();
            }
            return base;
        }
    }
    if w.len() >= 4 && w.ends_with('s') && !w.ends_with("ss") {
        return w[..w.len() - 1].to_string();
    }
    w.to_string()
}

/// n-gram multiset as a deterministic map keyed by unit-separated joins.
/// BTreeMap keeps iteration (and therefore float summation) order fixed so
/// repeated evaluations are bit-identical.
pub fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        *counts.entry(window.join("\u{1f}")).or_insert(0) += 1;
    }
    counts
}

pub fn ngram_total(tokens: &[String], n: usize) -> usize {
    (tokens.len() + 1).saturating_sub(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_strips_edges_and_case() {
        assert_eq!(tokenize("The car, stops."), vec!["the", "car", "stops"]);
        assert_eq!(tokenize("  "), Vec::<String>::new());
    }

    #[test]
    fn stem_rules() {
        assert_eq!(stem("stopping"), "stop");
        assert_eq!(stem("crossing"), "cross");
        assert_eq!(stem("pulling"), "pull");
        assert_eq!(stem("turned"), "turn");
        assert_eq!(stem("stops"), "stop");
        assert_eq!(stem("pass"), "pass");
        assert_eq!(stem("ed"), "ed");
    }

    #[test]
    fn bigram_counts() {
        let t = tokenize("a b a b");
        let c = ngram_counts(&t, 2);
        assert_eq!(c.get("a\u{1f}b"), Some(&2));
        assert_eq!(c.get("b\u{1f}a"), Some(&1));
        assert_eq!(ngram_total(&t, 2), 3);
    }
}
