//! Evaluation metrics for joint captioning + risk-box regression: corpus
//! BLEU-1/4, METEOR, CIDEr, mean IoU, Acc@IoU>0.5, size-bucketed IoU, and
//! the combined report/table rendering.
//!
//! All functions are pure; repeated evaluation of the same inputs is
//! bit-identical (n-gram accumulation iterates ordered maps, never
//! randomized hash order).

mod bleu;
mod boxes;
mod cider;
mod error;
mod meteor;
mod report;
mod text;

pub use bleu::bleu;
pub use boxes::{acc_at, iou, miou, size_bucketed_iou, BucketStats, BucketThresholds};
pub use cider::{cider, CIDER_SCALE};
pub use error::{MetricError, Result};
pub use meteor::{meteor, meteor_sentence};
pub use report::{render_table, Conventions, MetricReport};
pub use text::{ngram_counts, ngram_total, stem, tokenize};
