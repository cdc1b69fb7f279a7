use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("candidate/reference count mismatch: {cands} candidates vs {refs} references")]
    LengthMismatch { cands: usize, refs: usize },
    #[error("n-gram order must be at least 1")]
    BadOrder,
    #[error("degenerate box {b:?}: extents must be positive and finite")]
    DegenerateBox { b: [f64; 4] },
    #[error("tf-idf undefined: need at least 2 distinct references, got {distinct}")]
    DegenerateIdf { distinct: usize },
    #[error("bucket thresholds must satisfy 0 < small_below < large_from, got {small_below} / {large_from}")]
    BadThresholds { small_below: f64, large_from: f64 },
}

pub type Result<T> = std::result::Result<T, MetricError>;
