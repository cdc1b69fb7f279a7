//! Decoder-only caption model with visual prefix injection.
//!
//! Pre-norm causal transformer. Block 0 is plain text attention; every
//! later block additionally attends to Q prefix tokens (per-block adapter
//! parameters plus the fused visual tokens) through a separate softmax
//! whose readout is added to the text readout. Zeroing the fused tokens
//! and the adapters makes the prefix values exactly zero (the key/value
//! projections carry no bias), so the injected term vanishes and the
//! logits collapse to those of a text-only transformer.

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::layers::{attn_weights, ffn, layer_norm, mha};
use crate::params::Bound;
use crate::tokenizer::{Tokenizer, BOS, EOS};
use drivecap_tensor::{Tape, Var};

/// The fixed question posed for every scene. Kept lowercase to match the
/// caption corpus the tokenizer is trained on.
pub const PROMPT: &str = "what is the current driving scenario ? which object is at the \
                          highest risk ? then predict the intentions and suggestions for \
                          the ego car .";

/// `[BOS, prompt..., answer..., EOS]` plus the prompt length (BOS included).
/// Loss and decoding treat everything from `prompt_len` on as the answer.
pub fn compose_sequence(tok: &Tokenizer, answer: &str) -> (Vec<usize>, usize) {
    let p = inner_pieces(tok, PROMPT);
    let a = inner_pieces(tok, answer);
    let mut ids = Vec::with_capacity(2 + p.len() + a.len());
    ids.push(BOS);
    ids.extend_from_slice(&p);
    let prompt_len = ids.len();
    ids.extend_from_slice(&a);
    ids.push(EOS);
    (ids, prompt_len)
}

/// Encode without the BOS/EOS frame.
pub fn inner_pieces(tok: &Tokenizer, text: &str) -> Vec<usize> {
    let ids = tok.encode(text);
    ids[1..ids.len() - 1].to_vec()
}

/// `[BOS, prompt...]` — the decoding prefix shared by every record.
pub fn prompt_ids(tok: &Tokenizer) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(inner_pieces(tok, PROMPT));
    ids
}

/// Token logits `[T, vocab]` for a full sequence. `fused` carries the
/// `[Q, D_l]` visual tokens; `None` runs the text-only graph (used by the
/// reduction test and as the behavior floor).
pub fn lm_forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    ids: &[usize],
    fused: Option<Var>,
) -> Result<Var> {
    let x = lm_hidden(tape, bound, cfg, ids, fused)?;
    Ok(tape.matmul(x, bound.var("lm.head"))?)
}

/// Final-norm hidden states `[T, D_l]` — the representation right before
/// the vocabulary head. The localization module can consume these instead
/// of raw embeddings.
pub fn lm_hidden(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    ids: &[usize],
    fused: Option<Var>,
) -> Result<Var> {
    if ids.len() > cfg.context {
        return Err(ModelError::ContextOverflow {
            len: ids.len(),
            context: cfg.context,
        });
    }
    let t = ids.len();
    let embed = tape.embed(bound.var("lm.embed"), ids)?;
    let pos = tape.slice_rows(bound.var("lm.pos"), 0, t)?;
    let mut x = tape.add(embed, pos)?;

    for b in 0..cfg.lm_blocks {
        let base = format!("lm.b{b}");
        let h = layer_norm(tape, x, bound, &format!("{base}.ln1"))?;
        let prefix = match (b >= 1, fused) {
            (true, Some(f)) => {
                let adapter = bound.var(&format!("{base}.adapter"));
                Some(tape.add(adapter, f)?)
            }
            _ => None,
        };
        let aw = attn_weights(bound, &format!("{base}.attn"));
        let a = mha(tape, h, h, &aw, cfg.heads, true, None, prefix)?;
        x = tape.add(x, a)?;
        let h = layer_norm(tape, x, bound, &format!("{base}.ln2"))?;
        let f = ffn(tape, h, bound, &format!("{base}.ffn"))?;
        x = tape.add(x, f)?;
    }
    layer_norm(tape, x, bound, "lm.final_ln")
}

/// Mean cross-entropy over the answer span (answer tokens plus the closing
/// EOS); prompt positions contribute nothing.
pub fn caption_loss(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    ids: &[usize],
    prompt_len: usize,
    fused: Option<Var>,
) -> Result<Var> {
    debug_assert!(prompt_len + 1 < ids.len(), "no answer tokens to score");
    let logits = lm_forward(tape, bound, cfg, ids, fused)?;
    let t = ids.len();
    let scored = tape.slice_rows(logits, 0, t - 1)?;
    let targets = &ids[1..];
    let mask: Vec<bool> = (0..t - 1).map(|i| i + 1 >= prompt_len).collect();
    Ok(tape.cross_entropy(scored, targets, &mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{build_params, stage1_trainable, OptState};
    use drivecap_tensor::{SeedRng, Tensor};

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.c = 16;
        cfg.d_l = 48;
        cfg.q = 4;
        cfg.heads = 4;
        cfg.lm_blocks = 2;
        cfg.reg_layers = 2;
        cfg.c_bb_lo = 12;
        cfg.c_bb_hi = 8;
        cfg.context = 64;
        cfg
    }

    fn corpus() -> Vec<String> {
        // Repeat each line so every word pair clears the merge threshold;
        // otherwise sequences stay near character level and overflow the
        // test-sized context window.
        [
            "the scene is an urban road with several lanes .",
            "the highest risk object is a red car in the near left region .",
            PROMPT,
        ]
        .iter()
        .flat_map(|l| std::iter::repeat(l.to_string()).take(3))
        .collect()
    }

    #[test]
    fn sequences_over_the_context_are_rejected() {
        let cfg = small_cfg();
        let p = build_params(&cfg, 60).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, &stage1_trainable);
        let ids = vec![BOS; cfg.context + 1];
        match lm_forward(&mut tape, &bound, &cfg, &ids, None) {
            Err(ModelError::ContextOverflow { len, context }) => {
                assert_eq!((len, context), (cfg.context + 1, cfg.context));
            }
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn future_tokens_cannot_move_earlier_logits() {
        let cfg = small_cfg();
        let tok = Tokenizer::train(&corpus(), 256).unwrap();
        let p = build_params(&cfg, tok.vocab()).unwrap();
        let (ids, _) = compose_sequence(&tok, "the scene is an urban road with several lanes .");
        let mut other = ids.clone();
        let flip = ids.len() - 3;
        other[flip] = (other[flip] + 1) % tok.vocab();

        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, &stage1_trainable);
        let mut rng = SeedRng::new(9);
        let fused = Tensor::new(rng.uniform_vec(cfg.q * cfg.d_l, -0.5, 0.5), vec![cfg.q, cfg.d_l]).unwrap();
        let fa = tape.from_tensor(&fused, false);
        let la = lm_forward(&mut tape, &bound, &cfg, &ids, Some(fa)).unwrap();
        let lb = lm_forward(&mut tape, &bound, &cfg, &other, Some(fa)).unwrap();

        let v = tok.vocab();
        let (a, b) = (tape.value(la), tape.value(lb));
        for t in 0..flip {
            assert_eq!(&a[t * v..(t + 1) * v], &b[t * v..(t + 1) * v], "row {t}");
        }
        assert_ne!(&a[flip * v..], &b[flip * v..]);
    }

    #[test]
    fn zero_visual_input_reduces_to_text_only_logits() {
        let cfg = small_cfg();
        let tok = Tokenizer::train(&corpus(), 256).unwrap();
        // Adapters are zero at init, so zeroed fused tokens make the whole
        // prefix zero — the injected readout must vanish exactly.
        let p = build_params(&cfg, tok.vocab()).unwrap();

        let (ids, _) = compose_sequence(&tok, "the scene is an urban road with several lanes .");
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, &stage1_trainable);
        let zeros = tape.constant(vec![0.0; cfg.q * cfg.d_l], vec![cfg.q, cfg.d_l]).unwrap();
        let with_zero = lm_forward(&mut tape, &bound, &cfg, &ids, Some(zeros)).unwrap();
        let text_only = lm_forward(&mut tape, &bound, &cfg, &ids, None).unwrap();
        let a = tape.value(with_zero).to_vec();
        let b = tape.value(text_only).to_vec();
        assert_eq!(a, b, "zero prefix must be indistinguishable from no prefix");

        // The collapse is about content, not wiring: live fused tokens must
        // move the logits even on a fresh model.
        let mut rng = SeedRng::new(9);
        let live = tape
            .constant(rng.uniform_vec(cfg.q * cfg.d_l, -0.5, 0.5), vec![cfg.q, cfg.d_l])
            .unwrap();
        let with_live = lm_forward(&mut tape, &bound, &cfg, &ids, Some(live)).unwrap();
        assert_ne!(tape.value(with_live).to_vec(), b);
    }

    #[test]
    fn answer_mask_covers_answer_and_eos_only() {
        let cfg = small_cfg();
        let tok = Tokenizer::train(&corpus(), 256).unwrap();
        let p = build_params(&cfg, tok.vocab()).unwrap();
        let (ids, prompt_len) = compose_sequence(&tok, "the scene is an urban road with several lanes .");

        // Perturbing a prompt-interior target must leave the loss unchanged
        // only if the prompt is masked out; verify by comparing against a
        // manual mean over answer rows.
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, &stage1_trainable);
        let loss = caption_loss(&mut tape, &bound, &cfg, &ids, prompt_len, None).unwrap();
        let logits = lm_forward(&mut tape, &bound, &cfg, &ids, None).unwrap();

        let v = tok.vocab();
        let vals = tape.value(logits);
        let mut manual = 0.0;
        let mut n = 0.0;
        for t in prompt_len - 1..ids.len() - 1 {
            let row = &vals[t * v..(t + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            manual += lse - row[ids[t + 1]];
            n += 1.0;
        }
        manual /= n;
        assert!((tape.scalar_value(loss) - manual).abs() < 1e-12);
    }

    #[test]
    fn one_record_overfits_below_a_centinat_within_500_steps() {
        let cfg = small_cfg();
        let tok = Tokenizer::train(&corpus(), 256).unwrap();
        let mut p = build_params(&cfg, tok.vocab()).unwrap();
        let (ids, prompt_len) =
            compose_sequence(&tok, "the highest risk object is a red car in the near left region .");
        let fused = {
            let mut rng = SeedRng::new(21);
            Tensor::new(rng.uniform_vec(cfg.q * cfg.d_l, -0.5, 0.5), vec![cfg.q, cfg.d_l]).unwrap()
        };

        let mut opt = OptState::new();
        let mut last = f64::INFINITY;
        let mut steps = 0;
        for step in 0..500 {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, &stage1_trainable);
            let f = tape.from_tensor(&fused, false);
            let loss = caption_loss(&mut tape, &bound, &cfg, &ids, prompt_len, Some(f)).unwrap();
            last = tape.scalar_value(loss);
            steps = step + 1;
            if last < 0.01 {
                break;
            }
            tape.backward(loss).unwrap();
            p.adam_step(&tape, &bound, &mut opt, 2e-3, &stage1_trainable, 1.0)
                .unwrap();
        }
        assert!(
            last < 0.01,
            "loss {last} after {steps} steps never reached 0.01 nats"
        );
    }

    #[test]
    fn fused_tokens_and_adapters_learn_from_the_first_step() {
        let cfg = small_cfg();
        let tok = Tokenizer::train(&corpus(), 256).unwrap();
        let p = build_params(&cfg, tok.vocab()).unwrap();
        let (ids, prompt_len) = compose_sequence(&tok, "the scene is an urban road with several lanes .");
        let mut rng = SeedRng::new(13);
        let fused = Tensor::new(rng.uniform_vec(cfg.q * cfg.d_l, -0.5, 0.5), vec![cfg.q, cfg.d_l]).unwrap();

        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, &stage1_trainable);
        let f = tape.from_tensor(&fused, true);
        let loss = caption_loss(&mut tape, &bound, &cfg, &ids, prompt_len, Some(f)).unwrap();
        tape.backward(loss).unwrap();

        // On a fresh model both the adapter and the fused visual tokens
        // feel the caption loss directly; nothing has to "open" first, so
        // the visual stack behind them trains from step one.
        let ga = tape.grad(bound.var("lm.b1.adapter")).unwrap();
        assert!(ga.iter().any(|&g| g != 0.0));
        let gf = tape.grad(f).unwrap();
        assert!(gf.iter().any(|&g| g != 0.0));
    }
}
