//! Brute-force reference implementations of every evaluation metric.
//!
//! This crate exists to be diffed against: the production metrics are
//! required to agree with these functions to 1e-9 on random corpora. To keep
//! the comparison meaningful, everything here is written as a direct, slow
//! transcription of the metric definitions — linear scans over n-gram lists,
//! no hash maps, no shared helpers with the production crate. It is wired
//! into the workspace only as a dev-dependency.

/// Lowercase, split on whitespace, trim non-alphanumeric edges.
pub fn tokenize_ref(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Light suffix stemmer: strip the first of ing/ed/es (then undouble a
/// trailing doubled consonant other than l/s/z), else a trailing s,
/// whenever at least three characters remain.
pub fn stem_ref(w: &str) -> String {
    for suf in ["ing", "ed", "es"] {
        if w.len() >= suf.len() + 3 && w.ends_with(suf) {
            let base: Vec<char> = w[..w.len() - suf.len()].chars().collect();
            let k = base.len();
            let undouble = k >= 2
                && base[k - 1] == base[k - 2]
                && base[k - 1] != 'l'
                && base[k - 1] != 's'
                && base[k - 1] != 'z';
            let end = if undouble { k - 1 } else { k };
            return base[..end].iter().collect();
        }
    }
    if w.len() >= 4 && w.ends_with('s') && !w.ends_with("ss") {
        return w[..w.len() - 1].to_string();
    }
    w.to_string()
}

fn ngram_list(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n)
        .map(|i| tokens[i..i + n].to_vec())
        .collect()
}

fn count_of(grams: &[Vec<String>], g: &[String]) -> usize {
    grams.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(grams: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in grams {
        if !out.iter().any(|x| x == g) {
            out.push(g.clone());
        }
    }
    out
}

// ── BLEU ────────────────────────────────────────────────────────────────

pub fn bleu_ref(cands: &[Vec<String>], refs: &[Vec<String>], max_n: usize) -> f64 {
    assert_eq!(cands.len(), refs.len());
    assert!(!cands.is_empty());
    let cand_total: usize = cands.iter().map(Vec::len).sum();
    let ref_total: usize = refs.iter().map(Vec::len).sum();
    if cand_total == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let mut clipped = 0usize;
        let mut total = 0usize;
        for (c, r) in cands.iter().zip(refs) {
            let cg = ngram_list(c, n);
            let rg = ngram_list(r, n);
            total += cg.len();
            for g in distinct(&cg) {
                clipped += count_of(&cg, &g).min(count_of(&rg, &g));
            }
        }
        if clipped == 0 || total == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let bp = if cand_total > ref_total {
        1.0
    } else {
        (1.0 - ref_total as f64 / cand_total as f64).exp()
    };
    100.0 * bp * (log_sum / max_n as f64).exp()
}

// ── METEOR ──────────────────────────────────────────────────────────────

/// Greedy leftmost unigram alignment, exact stage then stem stage.
fn align_ref(c: &[String], r: &[String]) -> Vec<(usize, usize)> {
    let mut r_used = vec![false; r.len()];
    let mut c_match: Vec<Option<usize>> = vec![None; c.len()];
    for i in 0..c.len() {
        for j in 0..r.len() {
            if !r_used[j] && c[i] == r[j] {
                r_used[j] = true;
                c_match[i] = Some(j);
                break;
            }
        }
    }
    for i in 0..c.len() {
        if c_match[i].is_some() {
            continue;
        }
        for j in 0..r.len() {
            if !r_used[j] && stem_ref(&c[i]) == stem_ref(&r[j]) {
                r_used[j] = true;
                c_match[i] = Some(j);
                break;
            }
        }
    }
    c_match
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| (i, j)))
        .collect()
}

pub fn meteor_sentence_ref(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let pairs = align_ref(c, r);
    let m = pairs.len() as f64;
    if pairs.is_empty() {
        return 0.0;
    }
    let p = m / c.len() as f64;
    let rec = m / r.len() as f64;
    let f = p * rec / (0.9 * p + 0.1 * rec);
    let mut chunks = 1usize;
    for w in pairs.windows(2) {
        if !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1) {
            chunks += 1;
        }
    }
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    100.0 * f * (1.0 - penalty)
}

pub fn meteor_ref(cands: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    assert_eq!(cands.len(), refs.len());
    assert!(!cands.is_empty());
    let sum: f64 = cands
        .iter()
        .zip(refs)
        .map(|(c, r)| meteor_sentence_ref(c, r))
        .sum();
    sum / cands.len() as f64
}

// ── CIDEr ───────────────────────────────────────────────────────────────

pub fn cider_ref(cands: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    assert_eq!(cands.len(), refs.len());
    assert!(refs.len() >= 2);
    let r_count = refs.len() as f64;
    let ref_grams: Vec<Vec<Vec<Vec<String>>>> = (1..=4)
        .map(|n| refs.iter().map(|r| ngram_list(r, n)).collect())
        .collect();
    let mut over_n = 0.0;
    for n in 1..=4usize {
        let mut pair_sum = 0.0;
        for (c, r) in cands.iter().zip(refs) {
            let cg = ngram_list(c, n);
            let rg = ngram_list(r, n);
            let mut union = distinct(&cg);
            for g in distinct(&rg) {
                if !union.iter().any(|x| *x == g) {
                    union.push(g);
                }
            }
            let mut dot = 0.0;
            let mut nc = 0.0;
            let mut nr = 0.0;
            for g in &union {
                let df = ref_grams[n - 1]
                    .iter()
                    .filter(|sent| sent.iter().any(|x| x == g))
                    .count();
                let idf = (r_count / 1.0_f64.max(df as f64)).ln();
                let wc = if cg.is_empty() {
                    0.0
                } else {
                    count_of(&cg, g) as f64 / cg.len() as f64 * idf
                };
                let wr = if rg.is_empty() {
                    0.0
                } else {
                    count_of(&rg, g) as f64 / rg.len() as f64 * idf
                };
                dot += wc * wr;
                nc += wc * wc;
                nr += wr * wr;
            }
            if nc > 0.0 && nr > 0.0 {
                pair_sum += dot / (nc.sqrt() * nr.sqrt());
            }
        }
        over_n += pair_sum / cands.len() as f64;
    }
    1000.0 * over_n / 4.0
}

// ── Boxes ───────────────────────────────────────────────────────────────

/// Boxes are (cx, cy, w, h) in normalized coordinates.
pub fn iou_ref(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a[0] - a[2] / 2.0, a[1] - a[3] / 2.0, a[0] + a[2] / 2.0, a[1] + a[3] / 2.0);
    let (bx1, by1, bx2, by2) = (b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    inter / union
}

pub fn giou_ref(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a[0] - a[2] / 2.0, a[1] - a[3] / 2.0, a[0] + a[2] / 2.0, a[1] + a[3] / 2.0);
    let (bx1, by1, bx2, by2) = (b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let enc = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    inter / union - (enc - union) / enc
}

pub fn miou_ref(pairs: &[([f64; 4], [f64; 4])]) -> f64 {
    100.0 * pairs.iter().map(|&(a, b)| iou_ref(a, b)).sum::<f64>() / pairs.len() as f64
}

pub fn acc_ref(pairs: &[([f64; 4], [f64; 4])], tau: f64) -> f64 {
    let hits = pairs.iter().filter(|&&(a, b)| iou_ref(a, b) > tau).count();
    100.0 * hits as f64 / pairs.len() as f64
}

/// Per-bucket mean IoU and counts, bucketed by ground-truth area.
/// Pairs are (ground truth, prediction). Returns ([s, m, l], [counts]).
pub fn buckets_ref(
    pairs: &[([f64; 4], [f64; 4])],
    small_below: f64,
    large_from: f64,
) -> ([Option<f64>; 3], [usize; 3]) {
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for &(gt, pred) in pairs {
        let area = gt[2] * gt[3];
        let k = if area < small_below {
            0
        } else if area < large_from {
            1
        } else {
            2
        };
        sums[k] += iou_ref(gt, pred);
        counts[k] += 1;
    }
    let mut means = [None; 3];
    for k in 0..3 {
        if counts[k] > 0 {
            means[k] = Some(100.0 * sums[k] / counts[k] as f64);
        }
    }
    (means, counts)
}
