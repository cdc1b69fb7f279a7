//! Tape-free greedy decoding.
//!
//! Building an autodiff graph per generated token is wasteful: decoding
//! only ever needs the logits of the newest position. [`Decoder`] keeps
//! per-block key/value caches and advances one token at a time, mirroring
//! the tape forward pass operation for operation (same kernels, same
//! accumulation order), so its logits are bit-identical to
//! [`crate::lm::lm_forward`] on the same prefix.

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::layers::LN_EPS;
use crate::params::Params;
use crate::tokenizer::EOS;
use drivecap_tensor::kernels::matmul_acc;
use drivecap_tensor::Tensor;

/// First id beyond the special tokens (PAD, UNK, BOS, EOS).
const FIRST_REGULAR: usize = 4;

struct Block<'p> {
    ln1_g: &'p [f64],
    ln1_b: &'p [f64],
    wq: &'p [f64],
    wk: &'p [f64],
    wv: &'p [f64],
    wo: &'p [f64],
    ln2_g: &'p [f64],
    ln2_b: &'p [f64],
    w1: &'p [f64],
    b1: &'p [f64],
    w2: &'p [f64],
    b2: &'p [f64],
    /// Projected prefix keys/values `[Q, D]`, present on blocks past the
    /// first when visual tokens were supplied.
    prefix: Option<(Vec<f64>, Vec<f64>)>,
    k_cache: Vec<f64>,
    v_cache: Vec<f64>,
}

pub struct Decoder<'p> {
    blocks: Vec<Block<'p>>,
    embed: &'p [f64],
    pos: &'p [f64],
    final_g: &'p [f64],
    final_b: &'p [f64],
    head: &'p [f64],
    d: usize,
    heads: usize,
    vocab: usize,
    context: usize,
    ffn_width: usize,
    consumed: usize,
}

impl<'p> Decoder<'p> {
    /// `fused` carries the `[Q, D_l]` visual tokens; `None` decodes
    /// text-only.
    pub fn new(params: &'p Params, cfg: &ModelConfig, fused: Option<&Tensor>) -> Result<Self> {
        let d = cfg.d_l;
        let w = |name: &str| -> Result<&'p [f64]> { Ok(&params.get(name)?.data) };

        let mut blocks = Vec::with_capacity(cfg.lm_blocks);
        for b in 0..cfg.lm_blocks {
            let base = format!("lm.b{b}");
            let wk = w(&format!("{base}.attn.wk"))?;
            let wv = w(&format!("{base}.attn.wv"))?;
            let prefix = match (b >= 1, fused) {
                (true, Some(f)) => {
                    let adapter = w(&format!("{base}.adapter"))?;
                    let q = f.shape[0];
                    let tokens: Vec<f64> =
                        adapter.iter().zip(&f.data).map(|(&a, &v)| a + v).collect();
                    let mut pk = vec![0.0; q * d];
                    let mut pv = vec![0.0; q * d];
                    matmul_acc(&tokens, wk, q, d, d, &mut pk);
                    matmul_acc(&tokens, wv, q, d, d, &mut pv);
                    Some((pk, pv))
                }
                _ => None,
            };
            blocks.push(Block {
                ln1_g: w(&format!("{base}.ln1.g"))?,
                ln1_b: w(&format!("{base}.ln1.b"))?,
                wq: w(&format!("{base}.attn.wq"))?,
                wk,
                wv,
                wo: w(&format!("{base}.attn.wo"))?,
                ln2_g: w(&format!("{base}.ln2.g"))?,
                ln2_b: w(&format!("{base}.ln2.b"))?,
                w1: w(&format!("{base}.ffn.w1"))?,
                b1: w(&format!("{base}.ffn.b1"))?,
                w2: w(&format!("{base}.ffn.w2"))?,
                b2: w(&format!("{base}.ffn.b2"))?,
                prefix,
                k_cache: Vec::new(),
                v_cache: Vec::new(),
            });
        }

        let head = w("lm.head")?;
        Ok(Decoder {
            blocks,
            embed: w("lm.embed")?,
            pos: w("lm.pos")?,
            final_g: w("lm.final_ln.g")?,
            final_b: w("lm.final_ln.b")?,
            head,
            d,
            heads: cfg.heads,
            vocab: head.len() / d,
            context: cfg.context,
            ffn_width: 4 * d,
            consumed: 0,
        })
    }

    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.consumed
    }

    pub fn is_empty(&self) -> bool {
        self.consumed == 0
    }

    /// Consume one token and return the logits row for its position.
    pub fn feed(&mut self, id: usize) -> Result<Vec<f64>> {
        if self.consumed >= self.context {
            return Err(ModelError::ContextOverflow {
                len: self.consumed + 1,
                context: self.context,
            });
        }
        if id >= self.vocab {
            return Err(ModelError::Tokenizer(format!(
                "token id {id} outside vocabulary {}",
                self.vocab
            )));
        }
        let d = self.d;
        let t = self.consumed;
        let mut x: Vec<f64> = self.embed[id * d..(id + 1) * d]
            .iter()
            .zip(&self.pos[t * d..(t + 1) * d])
            .map(|(&e, &p)| e + p)
            .collect();

        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for block in &mut self.blocks {
            let h = norm_row(&x, block.ln1_g, block.ln1_b);
            let q = row_matmul(&h, block.wq, d, d);
            let k_new = row_matmul(&h, block.wk, d, d);
            let v_new = row_matmul(&h, block.wv, d, d);
            block.k_cache.extend_from_slice(&k_new);
            block.v_cache.extend_from_slice(&v_new);
            let s_len = block.k_cache.len() / d;

            let mut merged = vec![0.0; d];
            for hi in 0..self.heads {
                let off = hi * dh;
                let mut scores: Vec<f64> = (0..s_len)
                    .map(|s| {
                        let mut acc = 0.0;
                        for k in 0..dh {
                            let qv = q[off + k];
                            if qv != 0.0 {
                                acc += qv * block.k_cache[s * d + off + k];
                            }
                        }
                        acc * scale
                    })
                    .collect();
                softmax_row(&mut scores);
                let ctx = &mut merged[off..off + dh];
                for (s, &p) in scores.iter().enumerate() {
                    if p != 0.0 {
                        let v_row = &block.v_cache[s * d + off..s * d + off + dh];
                        for (c, &v) in ctx.iter_mut().zip(v_row) {
                            *c += p * v;
                        }
                    }
                }

                if let Some((pk, pv)) = &block.prefix {
                    let n_pfx = pk.len() / d;
                    let mut ps: Vec<f64> = (0..n_pfx)
                        .map(|s| {
                            let mut acc = 0.0;
                            for k in 0..dh {
                                let qv = q[off + k];
                                if qv != 0.0 {
                                    acc += qv * pk[s * d + off + k];
                                }
                            }
                            acc * scale
                        })
                        .collect();
                    softmax_row(&mut ps);
                    let mut pctx = vec![0.0; dh];
                    for (s, &p) in ps.iter().enumerate() {
                        if p != 0.0 {
                            let v_row = &pv[s * d + off..s * d + off + dh];
                            for (c, &v) in pctx.iter_mut().zip(v_row) {
                                *c += p * v;
                            }
                        }
                    }
                    for (c, &pc) in ctx.iter_mut().zip(&pctx) {
                        *c += pc;
                    }
                }
            }
            let attn_out = row_matmul(&merged, block.wo, d, d);
            for (xv, &a) in x.iter_mut().zip(&attn_out) {
                *xv += a;
            }

            let h = norm_row(&x, block.ln2_g, block.ln2_b);
            let mut f = row_matmul(&h, block.w1, d, self.ffn_width);
            for (fv, &b) in f.iter_mut().zip(block.b1) {
                *fv = gelu(*fv + b);
            }
            let mut f = row_matmul(&f, block.w2, self.ffn_width, d);
            for (fv, &b) in f.iter_mut().zip(block.b2) {
                *fv += b;
            }
            for (xv, &fv) in x.iter_mut().zip(&f) {
                *xv += fv;
            }
        }

        let x = norm_row(&x, self.final_g, self.final_b);
        self.consumed += 1;
        Ok(row_matmul(&x, self.head, d, self.vocab))
    }
}

/// Greedy decoding: feed the prompt, then repeatedly append the argmax
/// token (ties to the lowest id) until EOS, `max_len` regular tokens, or
/// the context window is exhausted. Returns generated ids, EOS excluded.
pub fn greedy_decode(
    params: &Params,
    cfg: &ModelConfig,
    prompt_ids: &[usize],
    fused: Option<&Tensor>,
    max_len: usize,
) -> Result<Vec<usize>> {
    if prompt_ids.is_empty() {
        return Err(ModelError::Tokenizer("empty decode prompt".into()));
    }
    let mut dec = Decoder::new(params, cfg, fused)?;
    let mut logits = Vec::new();
    for &id in prompt_ids {
        logits = dec.feed(id)?;
    }
    let mut out = Vec::new();
    let mut regular = 0;
    while regular < max_len && dec.len() < cfg.context {
        let next = argmax(&logits);
        if next == EOS {
            break;
        }
        out.push(next);
        if next >= FIRST_REGULAR {
            regular += 1;
        }
        if regular == max_len || dec.len() == cfg.context {
            break;
        }
        logits = dec.feed(next)?;
    }
    Ok(out)
}

/// Index of the largest value; the first one wins on exact ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn row_matmul(x: &[f64], w: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    matmul_acc(x, w, 1, k, n, &mut out);
    out
}

/// Layer norm over one row, matching the tape op's arithmetic exactly.
fn norm_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    (0..n).map(|j| (x[j] - mean) * inv * g[j] + b[j]).collect()
}

/// In-place max-subtracted softmax, matching the tape op's arithmetic.
fn softmax_row(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Matches the tape's GELU (tanh approximation) bit for bit.
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{caption_loss, compose_sequence, lm_forward, PROMPT};
    use crate::params::{build_params, stage1_trainable, OptState};
    use crate::tokenizer::{Tokenizer, BOS};
    use drivecap_tensor::{SeedRng, Tape};

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
        [
            "the scene is an urban road with several lanes .",
            "the highest risk object is a red car in the near left region .",
            PROMPT,
        ]
        .iter()
        .flat_map(|l| std::iter::repeat(l.to_string()).take(3))
        .collect()
    }

    /// Randomize the adapters so the prefix path does real work beyond the
    /// fused tokens themselves; zero adapters would cover less arithmetic.
    fn lively_params(cfg: &ModelConfig, vocab: usize) -> crate::params::Params {
        let mut p = build_params(cfg, vocab).unwrap();
        let mut rng = SeedRng::new(77);
        for b in 1..cfg.lm_blocks {
            for v in &mut p.get_mut(&format!("lm.b{b}.adapter")).unwrap().data {
                *v = rng.range(-0.5, 0.5);
            }
        }
        p
    }

    #[test]
    fn incremental_logits_match_the_tape_exactly() {
        let cfg = small_cfg();
        let tok = Tokenizer::train(&corpus(), 256).unwrap();
        let p = lively_params(&cfg, tok.vocab());
        let (ids, _) = compose_sequence(&tok, "the highest risk object is a red car in the near left region .");

        let mut rng = SeedRng::new(5);
        let fused = Tensor::new(rng.uniform_vec(cfg.q * cfg.d_l, -0.6, 0.6), vec![cfg.q, cfg.d_l]).unwrap();

        let mut dec = Decoder::new(&p, &cfg, Some(&fused)).unwrap();
        for t in 1..=ids.len() {
            let fast = dec.feed(ids[t - 1]).unwrap();
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, &|_| false);
            let f = tape.from_tensor(&fused, false);
            let logits = lm_forward(&mut tape, &bound, &cfg, &ids[..t], Some(f)).unwrap();
            let full = tape.value(logits);
            let last = &full[(t - 1) * tok.vocab()..t * tok.vocab()];
            for (j, (&a, &b)) in fast.iter().zip(last).enumerate() {
                assert!(
                    (a - b) == 0.0,
                    "position {} logit {j}: fast {a} vs tape {b}",
                    t - 1
                );
            }
        }
    }

    #[test]
    fn text_only_decoding_also_matches_the_tape() {
        let cfg = small_cfg();
        let tok = Tokenizer::train(&corpus(), 256).unwrap();
        let p = lively_params(&cfg, tok.vocab());
        let (ids, _) = compose_sequence(&tok, "the scene is an urban road with several lanes .");

        let mut dec = Decoder::new(&p, &cfg, None).unwrap();
        let mut fast_last = Vec::new();
        for &id in &ids {
            fast_last = dec.feed(id).unwrap();
        }
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, &|_| false);
        let logits = lm_forward(&mut tape, &bound, &cfg, &ids, None).unwrap();
        let full = tape.value(logits);
        let last = &full[(ids.len() - 1) * tok.vocab()..];
        assert!(fast_last.iter().zip(last).all(|(&a, &b)| (a - b) == 0.0));
    }

    #[test]
    fn overfit_model_reproduces_its_training_caption() {
        let cfg = small_cfg();
        let tok = Tokenizer::train(&corpus(), 256).unwrap();
        let mut p = build_params(&cfg, tok.vocab()).unwrap();
        let answer = "the highest risk object is a red car in the near left region .";
        let (ids, prompt_len) = compose_sequence(&tok, answer);
        let fused = {
            let mut rng = SeedRng::new(21);
            Tensor::new(rng.uniform_vec(cfg.q * cfg.d_l, -0.5, 0.5), vec![cfg.q, cfg.d_l]).unwrap()
        };

        let mut opt = OptState::new();
        for _ in 0..500 {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, &stage1_trainable);
            let f = tape.from_tensor(&fused, false);
            let loss = caption_loss(&mut tape, &bound, &cfg, &ids, prompt_len, Some(f)).unwrap();
            if tape.scalar_value(loss) < 0.005 {
                break;
            }
            tape.backward(loss).unwrap();
            p.adam_step(&tape, &bound, &mut opt, 2e-3, &stage1_trainable, 1.0)
                .unwrap();
        }

        let decoded = greedy_decode(&p, &cfg, &ids[..prompt_len], Some(&fused), 40).unwrap();
        assert_eq!(decoded, ids[prompt_len..ids.len() - 1].to_vec());
        assert_eq!(tok.decode(&decoded), answer);
    }

    #[test]
    fn decoding_twice_gives_identical_output() {
        let cfg = small_cfg();
        let tok = Tokenizer::train(&corpus(), 256).unwrap();
        let p = lively_params(&cfg, tok.vocab());
        let mut rng = SeedRng::new(30);
        let fused = Tensor::new(rng.uniform_vec(cfg.q * cfg.d_l, -0.6, 0.6), vec![cfg.q, cfg.d_l]).unwrap();
        let prompt = [BOS, 7, 9, 12];
        let a = greedy_decode(&p, &cfg, &prompt, Some(&fused), 20).unwrap();
        let b = greedy_decode(&p, &cfg, &prompt, Some(&fused), 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn max_len_one_yields_at_most_one_regular_token() {
        let cfg = small_cfg();
        let tok = Tokenizer::train(&corpus(), 256).unwrap();
        let p = lively_params(&cfg, tok.vocab());
        let out = greedy_decode(&p, &cfg, &[BOS, 5, 6], None, 1).unwrap();
        assert!(out.iter().filter(|&&id| id >= FIRST_REGULAR).count() <= 1);
    }

    #[test]
    fn generation_never_escapes_the_context_window() {
        let cfg = small_cfg();
        let tok = Tokenizer::train(&corpus(), 256).unwrap();
        let p = build_params(&cfg, tok.vocab()).unwrap();
        let prompt = vec![BOS; cfg.context - 2];
        let out = greedy_decode(&p, &cfg, &prompt, None, 1000).unwrap();
        assert!(prompt.len() + out.len() <= cfg.context);
    }

    #[test]
    fn argmax_breaks_ties_toward_the_lowest_id() {
        assert_eq!(argmax(&[0.5, 1.0, 1.0, 0.2]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        assert_eq!(argmax(&[-1.0, -3.0]), 0);
    }
}
