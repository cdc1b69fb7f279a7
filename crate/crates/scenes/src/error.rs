use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: schema version {found} unsupported (expected {expected})")]
    SchemaVersion {
        line: usize,
        found: u32,
        expected: u32,
    },
    #[error("line {line}: raster payload is {got} bytes, shape says {expected}")]
    RasterLength {
        line: usize,
        got: usize,
        expected: usize,
    },
    #[error("line {line}: base64: {source}")]
    Base64 {
        line: usize,
        #[source]
        source: base64::DecodeError,
    },
    #[error("box ({x}, {y}, {w}, {h}) leaves the unit square or has empty extent")]
    BadBox { x: f64, y: f64, w: f64, h: f64 },
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    BadFractions([f64; 3]),
    #[error("cannot generate {0} records (need at least 1)")]
    BadCount(usize),
}

pub type Result<T> = std::result::Result<T, SceneError>;
