//! Finite-difference verification of the two end-to-end losses.
//!
//! The per-operation derivatives are checked exhaustively in the tensor
//! crate; this module asks the stronger question of whether the full
//! graphs — frozen features through fusion into the caption loss, and
//! the regression stack into the box loss — differentiate correctly as
//! wholes. Each check builds a self-contained toy model, opens every
//! gate so no path is silently multiplied by zero, and probes a few
//! coordinates of parameters drawn from every module.

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::lm::{caption_loss, compose_sequence, inner_pieces};
use crate::params::{build_params, Params};
use crate::regressor::regress;
use crate::tokenizer::Tokenizer;
use crate::train::{fused_visual, precompute, scene_vars, train_tokenizer, SceneFeatures};
use drivecap_scenes::generate_one;
use drivecap_tensor::{grad_check_at, SeedRng, Tensor, TensorError, Var};
use std::collections::BTreeMap;

/// Central-difference step. Losses are O(1) and smooth in every direction
/// probed, so a mid-sized step balances truncation and cancellation.
pub const PROBE_STEP: f64 = 1e-5;
/// Coordinates probed per parameter.
const PROBES_PER_PARAM: usize = 3;

/// Worst relative errors over both end-to-end losses for one seed.
#[derive(Debug, Clone, Copy)]
pub struct SeedReport {
    pub caption_loss: f64,
    pub box_loss: f64,
}

impl SeedReport {
    pub fn worst(&self) -> f64 {
        self.caption_loss.max(self.box_loss)
    }
}

fn toy_cfg(seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.seed = seed;
    cfg.c = 8;
    cfg.d_l = 16;
    cfg.q = 2;
    cfg.heads = 2;
    cfg.lm_blocks = 2;
    cfg.reg_layers = 2;
    cfg.c_bb_lo = 6;
    cfg.c_bb_hi = 4;
    cfg.context = 160;
    cfg
}

/// One toy record, its tokenizer, and parameters with the fusion gate
/// opened and the adapters perturbed away from zero, so no probed path
/// sits at an identity point where a wrong derivative could hide.
fn toy_world(seed: u64) -> Result<(ModelConfig, Tokenizer, Params, SceneFeatures)> {
    let cfg = toy_cfg(seed);
    let record = generate_one(seed, 0);
    let feats = precompute(&cfg, std::slice::from_ref(&record))?
        .pop()
        .expect("one record in, one out");
    let captions: Vec<String> = std::iter::repeat(feats.caption.clone()).take(3).collect();
    let tok = train_tokenizer(&cfg, &captions)?;

    let mut params = build_params(&cfg, tok.vocab())?;
    let mut rng = SeedRng::named(seed, "verify.liven");
    params.get_mut("fuse.gate")?.data[0] = rng.range(0.2, 0.6);
    for b in 1..cfg.lm_blocks {
        for v in &mut params.get_mut(&format!("lm.b{b}.adapter"))?.data {
            *v = rng.range(-0.3, 0.3);
        }
    }
    Ok((cfg, tok, params, feats))
}

/// Parameters probed for the caption loss: one representative per module
/// so a broken backward rule anywhere in the graph is caught.
fn caption_probe_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = vec![
        "enc.lo.proj.w",
        "enc.hi.proj.b",
        "enc.rg.proj.w",
        "qf.lo.query",
        "qf.rg.attn.wk",
        "qf.hi.ffn.w2",
        "qf.rg.ln1.g",
        "fuse.sa.wq",
        "fuse.ca.wv",
        "fuse.gate",
        "fuse.out.w",
        "lm.embed",
        "lm.pos",
        "lm.b0.attn.wq",
        "lm.final_ln.g",
        "lm.head",
    ]
    .into_iter()
    .map(str::to_string)
    .collect::<Vec<_>>();
    for b in 1..cfg.lm_blocks {
        names.push(format!("lm.b{b}.adapter"));
        names.push(format!("lm.b{b}.ffn.w1"));
    }
    names
}

fn box_probe_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = vec![
        "reg.query",
        "reg.vis.lo.w",
        "reg.text.w",
        "reg.text.b",
        "reg.final_ln.g",
        "reg.head.w1",
        "reg.head.b2",
    ]
    .into_iter()
    .map(str::to_string)
    .collect::<Vec<_>>();
    for l in 0..cfg.reg_layers {
        names.push(format!("reg.l{l}.attn.wq"));
        names.push(format!("reg.l{l}.ffn.w2"));
    }
    names
}

/// Probe a sampled set of coordinates of the named parameters against
/// central differences of `loss`. Returns the worst relative error.
fn probe(
    params: &Params,
    names: &[String],
    seed: u64,
    loss: impl Fn(&mut drivecap_tensor::Tape, &crate::params::Bound) -> Result<Var>,
) -> Result<f64> {
    let inputs: Vec<Tensor> = names
        .iter()
        .map(|n| params.get(n).cloned())
        .collect::<Result<_>>()?;
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let mut rng = SeedRng::named(seed, &format!("verify.coords.{}", names[i]));
        for _ in 0..PROBES_PER_PARAM.min(t.numel()) {
            coords.push((i, rng.below(t.numel())));
        }
    }

    let err = grad_check_at(&inputs, &coords, PROBE_STEP, |tape, vars| {
        let overrides: BTreeMap<String, Var> = names
            .iter()
            .cloned()
            .zip(vars.iter().copied())
            .collect();
        let bound = params.bind_with(tape, &overrides);
        loss(tape, &bound).map_err(|e| match e {
            ModelError::Tensor(t) => t,
            other => TensorError::NonFinite {
                ctx: format!("graph construction failed: {other}"),
            },
        })
    })?;
    Ok(err)
}

/// Verify both end-to-end losses for one seed.
pub fn check_seed(seed: u64) -> Result<SeedReport> {
    let (cfg, tok, params, feats) = toy_world(seed)?;

    let (ids, prompt_len) = compose_sequence(&tok, &feats.caption);
    let caption_err = probe(&params, &caption_probe_names(&cfg), seed, |tape, bound| {
        let fused = fused_visual(tape, bound, &cfg, &feats)?;
        caption_loss(tape, bound, &cfg, &ids, prompt_len, Some(fused))
    })?;

    let caption_ids = inner_pieces(&tok, &feats.caption);
    let target = feats.gt_box;
    let box_err = probe(&params, &box_probe_names(&cfg), seed, |tape, bound| {
        let vars = scene_vars(tape, &feats);
        let out = regress(tape, bound, &cfg, &vars, &caption_ids, None)?;
        let tgt = tape.constant(target.to_vec(), vec![1, 4])?;
        crate::losses::box_loss_var(tape, out.box_pred, tgt)
    })?;

    Ok(SeedReport {
        caption_loss: caption_err,
        box_loss: box_err,
    })
}

/// Run [`check_seed`] over a range of seeds; returns per-seed reports.
pub fn check_seeds(seeds: std::ops::Range<u64>) -> Result<Vec<(u64, SeedReport)>> {
    seeds.map(|s| Ok((s, check_seed(s)?))).collect()
}
