//! Visual token compression and fusion.
//!
//! Each active branch (region proposals, low-res grid, high-res grid) is
//! projected to the shared width C and compressed by its own query former
//! into exactly Q tokens. The fusion step then enriches the region tokens
//! with grid context through gated cross-attention:
//!
//!   V_r = SelfAttn(L_r)
//!   V   = CrossAttn(V_r, [L_g ; H_g])     (keys/values projected 2C -> C)
//!   V^  = w * V + L_r                      (w is a scalar, zero at init)
//!
//! With w = 0 the output is bit-identical to the region tokens, so a fresh
//! model starts from a known-neutral fusion state. A config toggle swaps
//! the whole block for channel concatenation plus a linear map.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::layers::{attn_weights, ffn, layer_norm, linear, mha};
use crate::params::Bound;
use drivecap_tensor::{Tape, Var};

/// Compress `tokens` `[N, C]` into the `Q` learned queries of the former
/// rooted at `base` ("qf.lo" etc). Cross-attention carries no positional
/// information, so the result is invariant to input token order.
pub fn query_former(
    tape: &mut Tape,
    bound: &Bound,
    base: &str,
    tokens: Var,
    heads: usize,
) -> Result<Var> {
    let queries = bound.var(&format!("{base}.query"));
    let h = layer_norm(tape, queries, bound, &format!("{base}.ln1"))?;
    let aw = attn_weights(bound, &format!("{base}.attn"));
    let a = mha(tape, h, tokens, &aw, heads, false, None, None)?;
    let x = tape.add(queries, a)?;
    let h = layer_norm(tape, x, bound, &format!("{base}.ln2"))?;
    let f = ffn(tape, h, bound, &format!("{base}.ffn"))?;
    Ok(tape.add(x, f)?)
}

/// Query-former outputs for the active branches.
pub struct VisualBundle {
    /// Region branch, `[Q, C]`. Always present.
    pub l_r: Var,
    /// Low-res grid branch, `[Q, C]`.
    pub l_g: Option<Var>,
    /// High-res grid branch, `[Q, C]`.
    pub h_g: Option<Var>,
}

/// Run projections and query formers for every branch the config enables.
/// `lo`/`hi` are frozen patch tokens, `regions` the detector features; all
/// three enter the graph as constants upstream of this call.
pub fn visual_branches(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    lo: Option<Var>,
    hi: Option<Var>,
    regions: Var,
) -> Result<VisualBundle> {
    let r = linear(tape, regions, bound, "enc.rg.proj")?;
    let l_r = query_former(tape, bound, "qf.rg", r, cfg.heads)?;
    let l_g = match (cfg.use_lo, lo) {
        (true, Some(t)) => {
            let p = linear(tape, t, bound, "enc.lo.proj")?;
            Some(query_former(tape, bound, "qf.lo", p, cfg.heads)?)
        }
        _ => None,
    };
    let h_g = match (cfg.use_hi, hi) {
        (true, Some(t)) => {
            let p = linear(tape, t, bound, "enc.hi.proj")?;
            Some(query_former(tape, bound, "qf.hi", p, cfg.heads)?)
        }
        _ => None,
    };
    Ok(VisualBundle { l_r, l_g, h_g })
}

/// Fused visual tokens before and after the language-model projection.
pub struct FusionOut {
    /// `[Q, C]` fused tokens (equal to `l_r` when the gate sits at zero).
    pub v_hat: Var,
    /// `[Q, D_l]` tokens ready for prefix injection into the LM.
    pub tokens_lm: Var,
}

pub fn fuse(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    vis: &VisualBundle,
) -> Result<FusionOut> {
    let mut grids = Vec::new();
    if let Some(g) = vis.l_g {
        grids.push(g);
    }
    if let Some(g) = vis.h_g {
        grids.push(g);
    }
    debug_assert!(!grids.is_empty(), "config validation requires a grid branch");

    let v_hat = if cfg.use_gate {
        let c_g = if grids.len() == 1 {
            grids[0]
        } else {
            tape.concat_cols(&grids)?
        };
        let sa = attn_weights(bound, "fuse.sa");
        let v_r = mha(tape, vis.l_r, vis.l_r, &sa, cfg.heads, false, None, None)?;
        let ca = attn_weights(bound, "fuse.ca");
        let v = mha(tape, v_r, c_g, &ca, cfg.heads, false, None, None)?;
        let gated = tape.mul_scalar(v, bound.var("fuse.gate"))?;
        tape.add(gated, vis.l_r)?
    } else {
        let mut parts = vec![vis.l_r];
        parts.extend_from_slice(&grids);
        let cat = tape.concat_cols(&parts)?;
        linear(tape, cat, bound, "fuse.cat")?
    };
    let tokens_lm = linear(tape, v_hat, bound, "fuse.out")?;
    Ok(FusionOut { v_hat, tokens_lm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::params::{build_params, stage1_trainable, Params};
    use drivecap_tensor::{SeedRng, Tensor};

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.c = 16;
        cfg.d_l = 24;
        cfg.q = 4;
        cfg.heads = 4;
        cfg.c_bb_lo = 12;
        cfg.c_bb_hi = 8;
        cfg.lm_blocks = 2;
        cfg.reg_layers = 2;
        cfg
    }

    fn rand_tensor(rng: &mut SeedRng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(rng.uniform_vec(rows * cols, -1.0, 1.0), vec![rows, cols]).unwrap()
    }

    fn branches(
        tape: &mut Tape,
        bound: &Bound,
        cfg: &ModelConfig,
        rng: &mut SeedRng,
    ) -> VisualBundle {
        let lo = rand_tensor(rng, 49, cfg.c_bb_lo);
        let hi = rand_tensor(rng, 144, cfg.c_bb_hi);
        let rg = rand_tensor(rng, 12, cfg.c_bb_lo + 4);
        let lo = tape.from_tensor(&lo, false);
        let hi = tape.from_tensor(&hi, false);
        let rg = tape.from_tensor(&rg, false);
        visual_branches(tape, bound, cfg, Some(lo), Some(hi), rg).unwrap()
    }

    #[test]
    fn query_former_emits_q_tokens_for_any_input_length() {
        let cfg = small_cfg();
        let p = build_params(&cfg, 32).unwrap();
        let mut rng = SeedRng::new(0);
        for n in [3usize, 49, 144] {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, &stage1_trainable);
            let t = rand_tensor(&mut rng, n, cfg.c);
            let t = tape.from_tensor(&t, false);
            let out = query_former(&mut tape, &bound, "qf.lo", t, cfg.heads).unwrap();
            assert_eq!(tape.shape(out), &[cfg.q, cfg.c]);
        }
    }

    #[test]
    fn query_former_is_input_order_invariant() {
        let cfg = small_cfg();
        let p = build_params(&cfg, 32).unwrap();
        let mut rng = SeedRng::new(1);
        let base = rand_tensor(&mut rng, 10, cfg.c);

        // Rotate the token rows by 3.
        let mut rotated = vec![0.0; base.data.len()];
        for r in 0..10 {
            let src = (r + 3) % 10;
            rotated[r * cfg.c..(r + 1) * cfg.c]
                .copy_from_slice(&base.data[src * cfg.c..(src + 1) * cfg.c]);
        }
        let rotated = Tensor::new(rotated, vec![10, cfg.c]).unwrap();

        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, &stage1_trainable);
        let a = tape.from_tensor(&base, false);
        let b = tape.from_tensor(&rotated, false);
        let ya = query_former(&mut tape, &bound, "qf.hi", a, cfg.heads).unwrap();
        let yb = query_former(&mut tape, &bound, "qf.hi", b, cfg.heads).unwrap();
        for (x, y) in tape.value(ya).iter().zip(tape.value(yb)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gate_fusion_is_bit_identical_to_region_tokens() {
        let cfg = small_cfg();
        let p = build_params(&cfg, 32).unwrap();
        assert_eq!(p.get("fuse.gate").unwrap().data, vec![0.0]);
        let mut rng = SeedRng::new(2);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, &stage1_trainable);
            let vis = branches(&mut tape, &bound, &cfg, &mut rng);
            let out = fuse(&mut tape, &bound, &cfg, &vis).unwrap();
            assert_eq!(tape.value(out.v_hat), tape.value(vis.l_r));
        }
    }

    #[test]
    fn single_key_cross_attention_reduces_to_projected_value() {
        // With Q = 1 the cross-attention softmax runs over one key, so the
        // fused update is exactly C_g @ wv @ wo regardless of wq/wk.
        let mut cfg = small_cfg();
        cfg.q = 1;
        let mut p = build_params(&cfg, 32).unwrap();
        p.get_mut("fuse.gate").unwrap().data[0] = 1.0; // open the residual gate fully

        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, &stage1_trainable);
        let mut rng = SeedRng::new(3);
        let vis = branches(&mut tape, &bound, &cfg, &mut rng);
        let out = fuse(&mut tape, &bound, &cfg, &vis).unwrap();

        let c_g = tape.concat_cols(&[vis.l_g.unwrap(), vis.h_g.unwrap()]).unwrap();
        let kv = tape.matmul(c_g, bound.var("fuse.ca.wv")).unwrap();
        let v = tape.matmul(kv, bound.var("fuse.ca.wo")).unwrap();
        let expect = tape.add(v, vis.l_r).unwrap();

        for (a, b) in tape.value(out.v_hat).iter().zip(tape.value(expect)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn gate_gradient_is_nonzero_when_attention_output_is_not() {
        let cfg = small_cfg();
        let p = build_params(&cfg, 32).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, &stage1_trainable);
        let mut rng = SeedRng::new(4);
        let vis = branches(&mut tape, &bound, &cfg, &mut rng);
        let out = fuse(&mut tape, &bound, &cfg, &vis).unwrap();
        let loss = tape.sum_all(out.v_hat);
        tape.backward(loss).unwrap();
        let g = tape.grad(bound.var("fuse.gate")).unwrap();
        assert!(g[0].abs() > 1e-12, "gate gradient {g:?}");
    }

    #[test]
    fn zero_gate_blocks_gradients_into_grid_branches() {
        let cfg = small_cfg();
        let p = build_params(&cfg, 32).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, &stage1_trainable);
        let mut rng = SeedRng::new(5);
        let vis = branches(&mut tape, &bound, &cfg, &mut rng);
        let out = fuse(&mut tape, &bound, &cfg, &vis).unwrap();
        let loss = tape.sum_all(out.tokens_lm);
        tape.backward(loss).unwrap();

        for name in [
            "enc.lo.proj.w",
            "enc.hi.proj.w",
            "qf.lo.query",
            "qf.hi.attn.wv",
            "fuse.ca.wv",
        ] {
            if let Some(g) = tape.grad(bound.var(name)) {
                assert!(g.iter().all(|&v| v == 0.0), "{name} leaked gradient");
            }
        }
        // The region path still learns.
        let g = tape.grad(bound.var("qf.rg.query")).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn concat_fallback_produces_lm_tokens_and_trains_grids() {
        let mut cfg = small_cfg();
        cfg.use_gate = false;
        let p = build_params(&cfg, 32).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, &stage1_trainable);
        let mut rng = SeedRng::new(6);
        let vis = branches(&mut tape, &bound, &cfg, &mut rng);
        let out = fuse(&mut tape, &bound, &cfg, &vis).unwrap();
        assert_eq!(tape.shape(out.tokens_lm), &[cfg.q, cfg.d_l]);
        let loss = tape.sum_all(out.tokens_lm);
        tape.backward(loss).unwrap();
        let g = tape.grad(bound.var("qf.lo.query")).unwrap();
        assert!(g.iter().any(|&v| v != 0.0), "grids must train without the gate");
    }

    #[test]
    fn single_branch_config_fuses_with_narrow_keys() {
        let mut cfg = small_cfg();
        cfg.use_hi = false;
        cfg.regression_input = crate::config::RegressionInput::LoGrid;
        let p = build_params(&cfg, 32).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, &stage1_trainable);
        let mut rng = SeedRng::new(7);
        let lo = rand_tensor(&mut rng, 49, cfg.c_bb_lo);
        let rg = rand_tensor(&mut rng, 12, cfg.c_bb_lo + 4);
        let lo = tape.from_tensor(&lo, false);
        let rg = tape.from_tensor(&rg, false);
        let vis = visual_branches(&mut tape, &bound, &cfg, Some(lo), None, rg).unwrap();
        assert!(vis.h_g.is_none());
        let out = fuse(&mut tape, &bound, &cfg, &vis).unwrap();
        assert_eq!(tape.shape(out.v_hat), &[cfg.q, cfg.c]);
    }

    // Ensure Params::set is exercised somewhere close to its consumers.
    #[test]
    fn params_set_rejects_shape_changes() {
        let cfg = small_cfg();
        let mut p = build_params(&cfg, 32).unwrap();
        let bad = Tensor::zeros(&[3, 3]);
        assert!(Params::set(&mut p, "fuse.gate", bad).is_err());
    }
}
