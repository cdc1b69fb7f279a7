//! Aggregate evaluation report: caption metrics, box metrics, and the
//! conventions they were computed under, renderable as JSON (serde) or a
//! fixed-width table.

use serde::{Deserialize, Serialize};

use crate::bleu::bleu;
use crate::boxes::{acc_at, miou, size_bucketed_iou, BucketStats, BucketThresholds};
use crate::cider::cider;
use crate::error::Result;
use crate::meteor::meteor;

/// Metric variants in force, stamped into every report so numbers can be
/// compared like-for-like later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub meteor: String,
    pub cider: String,
    pub bucket_thresholds: BucketThresholds,
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions {
            meteor: "unigram alignment (exact + stem stages), alpha=0.9, gamma=0.5, beta=3; \
                     no synonym/paraphrase tables"
                .to_string(),
            cider: "tf-idf n-gram cosine, mean over n=1..4, x1000 scale \
                    (identical corpus with unshared n-grams scores 1000)"
                .to_string(),
            bucket_thresholds: BucketThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub b1: f64,
    pub b4: f64,
    pub meteor: f64,
    pub cider: f64,
    pub miou: f64,
    pub acc_05: f64,
    /// Average of BLEU-4 and mIoU: the single-number summary used for
    /// ablation comparisons.
    pub avg: f64,
    pub buckets: BucketStats,
    pub n_captions: usize,
    pub n_boxes: usize,
    pub conventions: Conventions,
}

impl MetricReport {
    /// Evaluate all metrics over a decoded corpus and its box predictions.
    /// `box_pairs` are (ground truth, prediction).
    pub fn compute(
        candidates: &[String],
        references: &[String],
        box_pairs: &[([f64; 4], [f64; 4])],
        conventions: Conventions,
    ) -> Result<Self> {
        let b1 = bleu(candidates, references, 1)?;
        let b4 = bleu(candidates, references, 4)?;
        let meteor_v = meteor(candidates, references)?;
        let cider_v = cider(candidates, references)?;
        let miou_v = miou(box_pairs)?;
        let acc_v = acc_at(box_pairs, 0.5)?;
        let buckets = size_bucketed_iou(box_pairs, conventions.bucket_thresholds)?;
        Ok(MetricReport {
            b1,
            b4,
            meteor: meteor_v,
            cider: cider_v,
            miou: miou_v,
            acc_05: acc_v,
            avg: (b4 + miou_v) / 2.0,
            buckets,
            n_captions: candidates.len(),
            n_boxes: box_pairs.len(),
            conventions,
        })
    }
}

fn opt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:>7.1}"),
        None => format!("{:>7}", "-"),
    }
}

/// Fixed-width table over labelled reports: caption metrics, box metrics,
/// the combined AVG column, then a per-size-bucket block.
pub fn render_table(rows: &[(String, MetricReport)]) -> String {
    let label_w = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain(std::iter::once("variant".len()))
        .max()
        .unwrap_or(7)
        + 2;
    let mut out = String::new();
    out.push_str(&format!(
        "{:<label_w$} {:>7} {:>7} {:>7} {:>8} | {:>7} {:>13} | {:>7}\n",
        "variant", "B1", "B4", "M", "C", "mIoU", "Acc(IoU>0.5)", "AVG"
    ));
    for (label, r) in rows {
        out.push_str(&format!(
            "{:<label_w$} {:>7.1} {:>7.1} {:>7.1} {:>8.1} | {:>7.1} {:>13.1} | {:>7.2}\n",
            label, r.b1, r.b4, r.meteor, r.cider, r.miou, r.acc_05, r.avg
        ));
    }
    out.push('\n');
    out.push_str(&format!(
        "{:<label_w$} {:>7} {:>7} {:>7}   (IoU by ground-truth size; counts ",
        "variant", "IoU-S", "IoU-M", "IoU-L"
    ));
    if let Some((_, first)) = rows.first() {
        out.push_str(&format!(
            "S/M/L = {}/{}/{})\n",
            first.buckets.count_small, first.buckets.count_medium, first.buckets.count_large
        ));
    } else {
        out.push_str(")\n");
    }
    for (label, r) in rows {
        out.push_str(&format!(
            "{:<label_w$} {} {} {}\n",
            label,
            opt_cell(r.buckets.small),
            opt_cell(r.buckets.medium),
            opt_cell(r.buckets.large)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_report() -> MetricReport {
        let cands = vec![
            "the red car waits at the crossing".to_string(),
            "a blue truck moves slowly ahead".to_string(),
        ];
        let pairs = vec![
            ([0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]),
            ([0.3, 0.3, 0.05, 0.05], [0.31, 0.3, 0.05, 0.05]),
        ];
        MetricReport::compute(&cands, &cands, &pairs, Conventions::default()).unwrap()
    }

    #[test]
    fn avg_is_mean_of_b4_and_miou() {
        let r = tiny_report();
        assert!((r.avg - (r.b4 + r.miou) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let r = tiny_report();
        let s = serde_json::to_string(&r).unwrap();
        let back: MetricReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn table_has_expected_columns() {
        let r = tiny_report();
        let t = render_table(&[("full".to_string(), r)]);
        for col in ["B1", "B4", "M", "C", "mIoU", "Acc(IoU>0.5)", "AVG", "IoU-S"] {
            assert!(t.contains(col), "missing column {col} in:\n{t}");
        }
    }
}
