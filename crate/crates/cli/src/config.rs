//! Run configuration: everything a run depends on, in one serializable
//! struct. The SHA-256 of its canonical JSON is stamped into every artifact
//! so a report can always be traced back to the exact settings (and seed)
//! that produced it.

use drivecap_model::train::{Stage1Opts, Stage2Opts};
use drivecap_model::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub n_scenes: usize,
    /// Train/val/test fractions; must sum to 1.
    pub split: [f64; 3],
    pub stage1: Stage1Opts,
    pub stage2: Stage2Opts,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            n_scenes: 1000,
            split: [0.70, 0.15, 0.15],
            stage1: Stage1Opts::default(),
            stage2: Stage2Opts::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.n_scenes == 0 {
            return Err(HarnessError::Config("n_scenes must be positive".into()));
        }
        let sum: f64 = self.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split.iter().any(|&f| f < 0.0) {
            return Err(HarnessError::Config(format!(
                "split fractions {:?} must be non-negative and sum to 1",
                self.split
            )));
        }
        if self.stage1.epochs == 0 || self.stage2.epochs == 0 {
            return Err(HarnessError::Config("both stages need at least one epoch".into()));
        }
        if self.stage1.batch == 0 || self.stage2.batch == 0 {
            return Err(HarnessError::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    /// Canonical JSON: compact, field order fixed by declaration. This is
    /// the byte string the config hash is computed over.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialization is infallible")
    }

    /// SHA-256 over [`canonical_json`](Self::canonical_json), hex-encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
