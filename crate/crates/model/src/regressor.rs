//! Risk-object localization head.
//!
//! A single learnable regression token is concatenated with projected
//! visual tokens and projected caption-token features, given sinusoidal
//! positions, run through a transformer encoder stack, and read out at
//! index 0 into an MLP + Sigmoid box (center x, center y, width, height).

use crate::config::{ModelConfig, RegressionInput, RegressionText};
use crate::error::{ModelError, Result};
use crate::layers::{encoder_layer, layer_norm, linear, sinusoidal_positions, MASKED};
use crate::lm;
use crate::params::Bound;
use crate::tokenizer::{BOS, EOS, PAD};
use drivecap_tensor::{Tape, Var};

/// Frozen per-scene feature handles available to the regressor. Which ones
/// must be present depends on `config.regression_input`.
#[derive(Clone, Copy, Default)]
pub struct SceneVars {
    /// `[49, c_bb_lo]` low-res grid tokens.
    pub lo: Option<Var>,
    /// `[144, c_bb_hi]` high-res grid tokens.
    pub hi: Option<Var>,
    /// `[n, c_bb_lo + 4]` detector features.
    pub det: Option<Var>,
}

pub struct RegressOut {
    /// `[1, 4]` box prediction, every component strictly inside (0, 1).
    pub box_pred: Var,
    /// The assembled `[1 + N_g + N_l, C]` input sequence (before positions),
    /// exposed for the token-mixing/padding checks.
    pub x0: Var,
    /// Real caption-token count (padding excluded).
    pub n_text: usize,
}

/// Run the localization stack. `caption_ids` are the bare caption pieces
/// (no BOS/EOS). `pad_text_to` right-pads the text block with PAD
/// embeddings up to the given length; padded positions are masked out of
/// every attention and provably cannot move the prediction.
pub fn regress(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    scene: &SceneVars,
    caption_ids: &[usize],
    pad_text_to: Option<usize>,
) -> Result<RegressOut> {
    if caption_ids.is_empty() {
        return Err(ModelError::BadConfig(
            "regression needs a non-empty caption".into(),
        ));
    }

    let vis = visual_tokens(tape, bound, cfg, scene)?;
    let n_text = caption_ids.len();
    let padded_len = pad_text_to.unwrap_or(n_text).max(n_text);
    let text = text_tokens(tape, bound, cfg, caption_ids, padded_len)?;

    let query = bound.var("reg.query");
    let x0 = tape.concat_rows(&[query, vis, text])?;

    let n = tape.shape(x0)[0];
    let pos = sinusoidal_positions(n, cfg.c);
    let pos = tape.from_tensor(&pos, false);
    let mut x = tape.add(x0, pos)?;

    // Mask padded caption slots out of every self-attention.
    let n_pad = padded_len - n_text;
    let key_mask = if n_pad > 0 {
        let mut m = vec![0.0; n * n];
        for row in 0..n {
            for col in n - n_pad..n {
                m[row * n + col] = MASKED;
            }
        }
        Some(tape.constant(m, vec![n, n])?)
    } else {
        None
    };

    for l in 0..cfg.reg_layers {
        x = encoder_layer(tape, x, bound, &format!("reg.l{l}"), cfg.heads, key_mask)?;
    }
    let x = layer_norm(tape, x, bound, "reg.final_ln")?;
    let head_in = tape.slice_rows(x, 0, 1)?;

    let h = tape.matmul(head_in, bound.var("reg.head.w1"))?;
    let h = tape.add_row(h, bound.var("reg.head.b1"))?;
    let h = tape.gelu(h);
    let raw = tape.matmul(h, bound.var("reg.head.w2"))?;
    let raw = tape.add_row(raw, bound.var("reg.head.b2"))?;
    let box_pred = tape.sigmoid(raw);

    Ok(RegressOut { box_pred, x0, n_text })
}

fn visual_tokens(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    scene: &SceneVars,
) -> Result<Var> {
    let need = |v: Option<Var>, what: &str| {
        v.ok_or_else(|| ModelError::BadConfig(format!("regression input needs {what} features")))
    };
    match cfg.regression_input {
        RegressionInput::LoGrid => {
            let t = need(scene.lo, "low-res grid")?;
            linear(tape, t, bound, "reg.vis.lo")
        }
        RegressionInput::HiGrid => {
            let t = need(scene.hi, "high-res grid")?;
            linear(tape, t, bound, "reg.vis.hi")
        }
        RegressionInput::Concat => {
            let lo = need(scene.lo, "low-res grid")?;
            let hi = need(scene.hi, "high-res grid")?;
            let lo = linear(tape, lo, bound, "reg.vis.lo")?;
            let hi = linear(tape, hi, bound, "reg.vis.hi")?;
            Ok(tape.concat_rows(&[lo, hi])?)
        }
        RegressionInput::Detector => {
            let t = need(scene.det, "detector")?;
            linear(tape, t, bound, "reg.vis.det")
        }
    }
}

/// Caption-token features mapped to width C: embedding rows by default, or
/// final hidden states of the text-only frozen LM under the toggle.
fn text_tokens(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    caption_ids: &[usize],
    padded_len: usize,
) -> Result<Var> {
    let mut ids = caption_ids.to_vec();
    ids.resize(padded_len, PAD);
    let features = match cfg.regression_text {
        RegressionText::Embeddings => tape.embed(bound.var("lm.embed"), &ids)?,
        RegressionText::Hidden => {
            let mut seq = Vec::with_capacity(ids.len() + 2);
            seq.push(BOS);
            seq.extend_from_slice(&ids);
            seq.push(EOS);
            let hidden = lm::lm_hidden(tape, bound, cfg, &seq, None)?;
            tape.slice_rows(hidden, 1, padded_len)?
        }
    };
    linear(tape, features, bound, "reg.text")
}
