//! Model hyperparameters and the ablation toggles that reshape the network.

use crate::error::{ModelError, Result};
use serde::{Deserialize, Serialize};

/// Which token set feeds the localization transformer alongside the
/// regression query and the caption embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressionInput {
    /// Pooled detector proposal features (variable count per scene).
    Detector,
    /// The 12x12 high-resolution patch grid.
    HiGrid,
    /// Low- and high-resolution grids stacked along the token axis.
    Concat,
    /// The 7x7 low-resolution patch grid (default).
    LoGrid,
}

/// Where the caption-side tokens for localization come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressionText {
    /// Token embedding rows looked up from the frozen language model (default).
    Embeddings,
    /// Final hidden states of the frozen language model run over the caption.
    Hidden,
}

/// Every knob that changes parameter shapes or the forward graph.
///
/// `seed` feeds both the frozen backbone weights and trainable-parameter
/// init, through independent named substreams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    /// Shared width of the query formers, fusion block and localization stack.
    pub c: usize,
    /// Language-model width.
    pub d_l: usize,
    /// Learned queries per query former.
    pub q: usize,
    pub heads: usize,
    pub lm_blocks: usize,
    pub reg_layers: usize,
    /// Maximum language-model sequence length.
    pub context: usize,
    /// Upper bound on tokenizer vocabulary (specials included).
    pub vocab_cap: usize,
    /// Channel width of the frozen low-resolution patch embedding.
    pub c_bb_lo: usize,
    /// Channel width of the frozen high-resolution patch embedding (kept
    /// narrower than the low-res one: it has ~3x the tokens).
    pub c_bb_hi: usize,
    pub use_lo: bool,
    pub use_hi: bool,
    /// When false, gate-attention fusion is replaced by channel
    /// concatenation plus a linear projection.
    pub use_gate: bool,
    pub regression_input: RegressionInput,
    pub regression_text: RegressionText,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seed: 0,
            c: 64,
            d_l: 128,
            q: 8,
            heads: 8,
            lm_blocks: 4,
            reg_layers: 6,
            context: 128,
            vocab_cap: 512,
            c_bb_lo: 64,
            c_bb_hi: 48,
            use_lo: true,
            use_hi: true,
            use_gate: true,
            regression_input: RegressionInput::LoGrid,
            regression_text: RegressionText::Embeddings,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.d_l == 0 || self.q == 0 || self.context == 0 {
            return Err(ModelError::BadConfig("zero-sized dimension".into()));
        }
        if !self.use_lo && !self.use_hi {
            return Err(ModelError::BadConfig(
                "at least one of use_lo / use_hi must be enabled".into(),
            ));
        }
        if self.heads == 0 || self.c % self.heads != 0 || self.d_l % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "head count {} must divide c={} and d_l={}",
                self.heads, self.c, self.d_l
            )));
        }
        if self.lm_blocks == 0 || self.reg_layers == 0 {
            return Err(ModelError::BadConfig("zero-depth stack".into()));
        }
        if self.vocab_cap < 8 {
            return Err(ModelError::BadConfig(format!(
                "vocab_cap {} leaves no room beyond specials",
                self.vocab_cap
            )));
        }
        // `use_lo` / `use_hi` toggle only the caption-side fusion branches;
        // the frozen backbone grids exist regardless, so the localization
        // input choice is deliberately independent of them.
        Ok(())
    }

    /// Number of grid branches entering fusion (1 or 2).
    pub fn grid_branches(&self) -> usize {
        usize::from(self.use_lo) + usize::from(self.use_hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_headless_or_branchless_configs() {
        let mut cfg = ModelConfig::default();
        cfg.use_lo = false;
        cfg.use_hi = false;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default();
        cfg.heads = 7; // does not divide 64
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn regression_input_is_independent_of_caption_branches() {
        // Dropping a caption fusion branch must not constrain what the
        // localization stack reads; its features come from the frozen
        // backbone, which always encodes both grids.
        let mut cfg = ModelConfig::default();
        cfg.use_lo = false;
        cfg.regression_input = RegressionInput::LoGrid;
        cfg.validate().unwrap();
    }

    #[test]
    fn toggles_serialize_kebab_case() {
        let s = serde_json::to_string(&RegressionInput::LoGrid).unwrap();
        assert_eq!(s, "\"lo-grid\"");
        let s = serde_json::to_string(&RegressionText::Embeddings).unwrap();
        assert_eq!(s, "\"embeddings\"");
    }
}
