//! Graph-building helpers shared by every module: linear maps, multi-head
//! attention (optionally causal, optionally with a key/value prefix), feed
//! forward blocks and positional tables.

use crate::error::Result;
use crate::params::Bound;
use drivecap_tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// x @ w + b with parameters `{base}.w` / `{base}.b`.
pub fn linear(tape: &mut Tape, x: Var, bound: &Bound, base: &str) -> Result<Var> {
    let y = tape.matmul(x, bound.var(&format!("{base}.w")))?;
    Ok(tape.add_row(y, bound.var(&format!("{base}.b")))?)
}

/// Layer norm over the channel axis with parameters `{base}.g` / `{base}.b`.
pub fn layer_norm(tape: &mut Tape, x: Var, bound: &Bound, base: &str) -> Result<Var> {
    Ok(tape.layer_norm(
        x,
        bound.var(&format!("{base}.g")),
        bound.var(&format!("{base}.b")),
        LN_EPS,
    )?)
}

/// Two-layer GELU feed-forward with parameters under `{base}`.
pub fn ffn(tape: &mut Tape, x: Var, bound: &Bound, base: &str) -> Result<Var> {
    let h = tape.matmul(x, bound.var(&format!("{base}.w1")))?;
    let h = tape.add_row(h, bound.var(&format!("{base}.b1")))?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, bound.var(&format!("{base}.w2")))?;
    Ok(tape.add_row(h, bound.var(&format!("{base}.b2")))?)
}

/// Projection handles for one attention module.
#[derive(Clone, Copy)]
pub struct AttnWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

pub fn attn_weights(bound: &Bound, base: &str) -> AttnWeights {
    AttnWeights {
        wq: bound.var(&format!("{base}.wq")),
        wk: bound.var(&format!("{base}.wk")),
        wv: bound.var(&format!("{base}.wv")),
        wo: bound.var(&format!("{base}.wo")),
    }
}

/// Multi-head attention.
///
/// * `q_in`: `[T, Dq]` query-side tokens.
/// * `kv_in`: `[S, W]` key/value-side tokens; `wk`/`wv` map `W -> Dq`, so the
///   two sides may have different widths.
/// * `causal`: mask out keys at positions after the query (requires T == S).
/// * `key_mask`: additive `[T, S]` score mask (0 to pass, [`MASKED`] to
///   block); combined with the causal mask when both are present.
/// * `prefix`: extra key/value tokens scored with a separate softmax; each
///   head's prefix readout is added to the text readout before the output
///   projection. With zero prefix tokens the result is bit-identical to
///   prefix-free attention: the key and value projections carry no bias, so
///   the prefix values are exactly zero and so is their weighted sum.
#[allow(clippy::too_many_arguments)]
pub fn mha(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    w: &AttnWeights,
    heads: usize,
    causal: bool,
    key_mask: Option<Var>,
    prefix: Option<Var>,
) -> Result<Var> {
    let d = tape.shape(q_in)[1];
    debug_assert_eq!(d % heads, 0, "head count must divide model width");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = tape.matmul(q_in, w.wq)?;
    let k = tape.matmul(kv_in, w.wk)?;
    let v = tape.matmul(kv_in, w.wv)?;

    let mut mask = if causal {
        let t = tape.shape(q)[0];
        debug_assert_eq!(t, tape.shape(k)[0], "causal attention needs T == S");
        Some(causal_mask(tape, t))
    } else {
        None
    };
    if let Some(km) = key_mask {
        mask = Some(match mask {
            Some(m) => tape.add(m, km)?,
            None => km,
        });
    }

    let pkv = match prefix {
        Some(tokens) => {
            let pk = tape.matmul(tokens, w.wk)?;
            let pv = tape.matmul(tokens, w.wv)?;
            Some((pk, pv))
        }
        None => None,
    };

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;

        let kt = tape.transpose(kh)?;
        let mut scores = tape.matmul(qh, kt)?;
        scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let attn = tape.softmax(scores, 1)?;
        let mut out = tape.matmul(attn, vh)?;

        if let Some((pk, pv)) = pkv {
            let pkh = tape.slice_cols(pk, h * dh, dh)?;
            let pvh = tape.slice_cols(pv, h * dh, dh)?;
            let pkt = tape.transpose(pkh)?;
            let ps = tape.matmul(qh, pkt)?;
            let ps = tape.scale(ps, scale);
            let pattn = tape.softmax(ps, 1)?;
            let pout = tape.matmul(pattn, pvh)?;
            out = tape.add(out, pout)?;
        }
        head_outs.push(out);
    }
    let merged = tape.concat_cols(&head_outs)?;
    Ok(tape.matmul(merged, w.wo)?)
}

/// Additive mask value that underflows to an exact 0.0 attention weight
/// after the max-subtracted softmax.
pub const MASKED: f64 = -1.0e30;

/// Additive causal mask: 0 on and below the diagonal, [`MASKED`] above it.
fn causal_mask(tape: &mut Tape, t: usize) -> Var {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = MASKED;
        }
    }
    tape.constant(data, vec![t, t]).expect("mask shape")
}

/// Pre-norm transformer encoder layer (self-attention + FFN, residuals).
/// Parameter names live under `{base}.{ln1,attn,ln2,ffn}`. `key_mask`
/// blocks chosen key columns in the self-attention.
pub fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    bound: &Bound,
    base: &str,
    heads: usize,
    key_mask: Option<Var>,
) -> Result<Var> {
    let h = layer_norm(tape, x, bound, &format!("{base}.ln1"))?;
    let aw = attn_weights(bound, &format!("{base}.attn"));
    let a = mha(tape, h, h, &aw, heads, false, key_mask, None)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, x, bound, &format!("{base}.ln2"))?;
    let f = ffn(tape, h, bound, &format!("{base}.ffn"))?;
    Ok(tape.add(x, f)?)
}

/// Fixed sinusoidal position table: `pe[p, 2i] = sin(p / 10000^(2i/d))`,
/// `pe[p, 2i+1] = cos(...)`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = p as f64 * rate;
            data[p * dim + 2 * i] = angle.sin();
            data[p * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(data, vec![len, dim]).expect("position shape")
}
