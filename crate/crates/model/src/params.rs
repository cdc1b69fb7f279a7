//! Named trainable parameters, deterministic init, and tape binding.
//!
//! Every parameter lives under a dotted name ("lm.b2.attn.wq"). Init draws
//! from a seeded substream keyed by that name, so adding or removing a
//! parameter never perturbs the init of any other.

use crate::config::{ModelConfig, RegressionInput};
use crate::error::{ModelError, Result};
use drivecap_tensor::{AdamState, SeedRng, Tape, Tensor, Var};
use std::collections::BTreeMap;

/// Ordered name -> tensor map. Iteration order is insertion order, which is
/// itself a pure function of the config, so checkpoints and optimizer state
/// stay aligned across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

/// How a parameter is initialized.
enum Init {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Fan(usize),
    Zeros,
    Ones,
}

impl Params {
    pub fn empty() -> Self {
        Params { entries: Vec::new(), index: BTreeMap::new() }
    }

    fn add(&mut self, seed: u64, name: &str, shape: &[usize], init: Init) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Fan(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = SeedRng::named(seed, name);
                rng.uniform_vec(numel, -bound, bound)
            }
        };
        let tensor = Tensor::new(data, shape.to_vec()).expect("init shape");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    /// Add a parameter with explicit starting values.
    fn add_fixed(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let tensor = Tensor::new(values.to_vec(), shape.to_vec()).expect("init shape");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        Ok(&mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Insertion-ordered view of all parameters.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replace a tensor wholesale (used by the checkpoint loader).
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let cur = self.get_mut(name)?;
        if cur.shape != tensor.shape {
            return Err(ModelError::Checkpoint(format!(
                "shape mismatch for `{name}`: have {:?}, loading {:?}",
                cur.shape, tensor.shape
            )));
        }
        *cur = tensor;
        Ok(())
    }

    /// Put every parameter on the tape as a leaf. Parameters for which
    /// `trainable` returns false become constants: they take part in the
    /// forward pass but receive no gradient buffers.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Bound {
        let mut map = BTreeMap::new();
        for (name, tensor) in &self.entries {
            let var = tape.from_tensor(tensor, trainable(name));
            map.insert(name.clone(), var);
        }
        Bound { map }
    }

    /// Bind where some parameters are pre-existing tape nodes (the
    /// finite-difference checker owns its probe leaves); everything else
    /// becomes a constant.
    pub fn bind_with(&self, tape: &mut Tape, overrides: &BTreeMap<String, Var>) -> Bound {
        let mut map = BTreeMap::new();
        for (name, tensor) in &self.entries {
            let var = overrides
                .get(name)
                .copied()
                .unwrap_or_else(|| tape.from_tensor(tensor, false));
            map.insert(name.clone(), var);
        }
        Bound { map }
    }

    /// Apply one Adam update to every parameter selected by `trainable`,
    /// reading gradients off the tape. Parameters the graph never touched
    /// are skipped.
    pub fn adam_step(
        &mut self,
        tape: &Tape,
        bound: &Bound,
        opt: &mut OptState,
        lr: f64,
        trainable: &dyn Fn(&str) -> bool,
        grad_scale: f64,
    ) -> Result<()> {
        for (name, tensor) in &mut self.entries {
            if !trainable(name) {
                continue;
            }
            let var = bound.map[name.as_str()];
            let Some(grad) = tape.grad(var) else { continue };
            let mut g: Vec<f64> = grad.to_vec();
            if grad_scale != 1.0 {
                g.iter_mut().for_each(|v| *v *= grad_scale);
            }
            let slot = opt.slot(name, tensor.numel());
            slot.step(&mut tensor.data, &g, lr);
        }
        Ok(())
    }

    /// Adam update from gradients accumulated across several tapes,
    /// scaled by `scale` (typically 1 / batch size).
    pub fn adam_step_buffered(
        &mut self,
        grads: &GradBuffer,
        opt: &mut OptState,
        lr: f64,
        scale: f64,
    ) -> Result<()> {
        for (name, g) in &grads.map {
            let tensor = self.get_mut(name)?;
            let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
            let slot = opt.slot(name, tensor.numel());
            slot.step(&mut tensor.data, &scaled, lr);
        }
        Ok(())
    }
}

/// Gradient accumulator for batches processed one record-tape at a time:
/// sums same-named gradients across tapes, then feeds
/// [`Params::adam_step_buffered`].
#[derive(Debug, Default)]
pub struct GradBuffer {
    map: BTreeMap<String, Vec<f64>>,
}

impl GradBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Add this tape's gradients for every parameter `trainable` selects.
    pub fn accumulate(
        &mut self,
        params: &Params,
        tape: &Tape,
        bound: &Bound,
        trainable: &dyn Fn(&str) -> bool,
    ) {
        for (name, tensor) in params.iter() {
            if !trainable(name) {
                continue;
            }
            let Some(grad) = tape.grad(bound.var(name)) else { continue };
            let entry = self
                .map
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; tensor.numel()]);
            for (e, &g) in entry.iter_mut().zip(grad) {
                *e += g;
            }
        }
    }
}

/// Tape handles for one binding of the parameter set.
pub struct Bound {
    map: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.map.get(name).copied()
    }
}

/// Per-parameter Adam moments. Each slot keeps its own step counter, so a
/// parameter that sat out some steps still gets correct bias correction.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    slots: BTreeMap<String, AdamState>,
}

impl OptState {
    pub fn new() -> Self {
        Self::default()
    }

    fn slot(&mut self, name: &str, numel: usize) -> &mut AdamState {
        self.slots
            .entry(name.to_string())
            .or_insert_with(|| AdamState::new(numel))
    }
}

/// Name prefixes owned by the caption stage (everything except `reg.`).
pub fn stage1_trainable(name: &str) -> bool {
    !name.starts_with("reg.")
}

/// Stage two trains only the localization module.
pub fn stage2_trainable(name: &str) -> bool {
    name.starts_with("reg.")
}

/// Build every parameter the configured model needs. `vocab` is the actual
/// tokenizer vocabulary size (not the cap).
pub fn build_params(cfg: &ModelConfig, vocab: usize) -> Result<Params> {
    cfg.validate()?;
    let seed = cfg.seed;
    let (c, d, q) = (cfg.c, cfg.d_l, cfg.q);
    let mut p = Params::empty();

    // Branch input projections into the shared width C.
    if cfg.use_lo {
        p.add(seed, "enc.lo.proj.w", &[cfg.c_bb_lo, c], Init::Fan(cfg.c_bb_lo));
        p.add(seed, "enc.lo.proj.b", &[c], Init::Zeros);
    }
    if cfg.use_hi {
        p.add(seed, "enc.hi.proj.w", &[cfg.c_bb_hi, c], Init::Fan(cfg.c_bb_hi));
        p.add(seed, "enc.hi.proj.b", &[c], Init::Zeros);
    }
    let region_width = cfg.c_bb_lo + 4;
    p.add(seed, "enc.rg.proj.w", &[region_width, c], Init::Fan(region_width));
    p.add(seed, "enc.rg.proj.b", &[c], Init::Zeros);

    // One query former per active branch; the region former always exists.
    let mut formers = vec!["rg"];
    if cfg.use_lo {
        formers.push("lo");
    }
    if cfg.use_hi {
        formers.push("hi");
    }
    for f in formers {
        let base = format!("qf.{f}");
        p.add(seed, &format!("{base}.query"), &[q, c], Init::Fan(c));
        add_layer_norm(&mut p, seed, &format!("{base}.ln1"), c);
        add_attn(&mut p, seed, &format!("{base}.attn"), c, c);
        add_layer_norm(&mut p, seed, &format!("{base}.ln2"), c);
        add_ffn(&mut p, seed, &format!("{base}.ffn"), c);
    }

    // Fusion: either gate-attention or concat + projection.
    let grid_width = cfg.grid_branches() * c;
    if cfg.use_gate {
        add_attn(&mut p, seed, "fuse.sa", c, c);
        p.add(seed, "fuse.ca.wq", &[c, c], Init::Fan(c));
        p.add(seed, "fuse.ca.wk", &[grid_width, c], Init::Fan(grid_width));
        p.add(seed, "fuse.ca.wv", &[grid_width, c], Init::Fan(grid_width));
        p.add(seed, "fuse.ca.wo", &[c, c], Init::Fan(c));
        // The residual gate starts at zero: fusion output reduces to the
        // region tokens exactly until training moves it.
        p.add(seed, "fuse.gate", &[1], Init::Zeros);
    } else {
        let cat_width = grid_width + c;
        p.add(seed, "fuse.cat.w", &[cat_width, c], Init::Fan(cat_width));
        p.add(seed, "fuse.cat.b", &[c], Init::Zeros);
    }
    p.add(seed, "fuse.out.w", &[c, d], Init::Fan(c));
    p.add(seed, "fuse.out.b", &[d], Init::Zeros);

    // Language model.
    p.add(seed, "lm.embed", &[vocab, d], Init::Fan(d));
    p.add(seed, "lm.pos", &[cfg.context, d], Init::Fan(d));
    for b in 0..cfg.lm_blocks {
        let base = format!("lm.b{b}");
        add_layer_norm(&mut p, seed, &format!("{base}.ln1"), d);
        add_attn(&mut p, seed, &format!("{base}.attn"), d, d);
        if b >= 1 {
            // Per-block additive prompt, zero-init: at the start the prefix
            // is exactly the fused visual tokens and nothing else.
            p.add(seed, &format!("{base}.adapter"), &[q, d], Init::Zeros);
        }
        add_layer_norm(&mut p, seed, &format!("{base}.ln2"), d);
        add_ffn(&mut p, seed, &format!("{base}.ffn"), d);
    }
    add_layer_norm(&mut p, seed, "lm.final_ln", d);
    p.add(seed, "lm.head", &[d, vocab], Init::Fan(d));

    // Localization stack (stage-2-only parameters, prefix "reg.").
    p.add(seed, "reg.query", &[1, c], Init::Fan(c));
    match cfg.regression_input {
        RegressionInput::LoGrid => {
            p.add(seed, "reg.vis.lo.w", &[cfg.c_bb_lo, c], Init::Fan(cfg.c_bb_lo));
            p.add(seed, "reg.vis.lo.b", &[c], Init::Zeros);
        }
        RegressionInput::HiGrid => {
            p.add(seed, "reg.vis.hi.w", &[cfg.c_bb_hi, c], Init::Fan(cfg.c_bb_hi));
            p.add(seed, "reg.vis.hi.b", &[c], Init::Zeros);
        }
        RegressionInput::Concat => {
            p.add(seed, "reg.vis.lo.w", &[cfg.c_bb_lo, c], Init::Fan(cfg.c_bb_lo));
            p.add(seed, "reg.vis.lo.b", &[c], Init::Zeros);
            p.add(seed, "reg.vis.hi.w", &[cfg.c_bb_hi, c], Init::Fan(cfg.c_bb_hi));
            p.add(seed, "reg.vis.hi.b", &[c], Init::Zeros);
        }
        RegressionInput::Detector => {
            p.add(seed, "reg.vis.det.w", &[region_width, c], Init::Fan(region_width));
            p.add(seed, "reg.vis.det.b", &[c], Init::Zeros);
        }
    }
    p.add(seed, "reg.text.w", &[d, c], Init::Fan(d));
    p.add(seed, "reg.text.b", &[c], Init::Zeros);
    for l in 0..cfg.reg_layers {
        let base = format!("reg.l{l}");
        add_layer_norm(&mut p, seed, &format!("{base}.ln1"), c);
        add_attn(&mut p, seed, &format!("{base}.attn"), c, c);
        add_layer_norm(&mut p, seed, &format!("{base}.ln2"), c);
        add_ffn(&mut p, seed, &format!("{base}.ffn"), c);
    }
    add_layer_norm(&mut p, seed, "reg.final_ln", c);
    p.add(seed, "reg.head.w1", &[c, c], Init::Fan(c));
    p.add(seed, "reg.head.b1", &[c], Init::Zeros);
    p.add(seed, "reg.head.w2", &[c, 4], Init::Fan(c));
    // Output bias starts at the geometric prior — centers mid-frame,
    // extents a small fraction of it (sigmoid(-1.5) ≈ 0.18). Under the
    // flat stage-2 learning rate, walking the bias there from zero would
    // burn thousands of Adam steps before the interesting learning starts.
    p.add_fixed("reg.head.b2", &[4], &[0.0, 0.0, -1.5, -1.5]);

    Ok(p)
}

fn add_layer_norm(p: &mut Params, seed: u64, base: &str, dim: usize) {
    p.add(seed, &format!("{base}.g"), &[dim], Init::Ones);
    p.add(seed, &format!("{base}.b"), &[dim], Init::Zeros);
}

/// Attention projections are bias-free throughout: zero key/value inputs
/// must map to zero, which keeps the zero-prefix reduction to text-only
/// attention exact.
fn add_attn(p: &mut Params, seed: u64, base: &str, q_width: usize, kv_width: usize) {
    p.add(seed, &format!("{base}.wq"), &[q_width, q_width], Init::Fan(q_width));
    p.add(seed, &format!("{base}.wk"), &[kv_width, q_width], Init::Fan(kv_width));
    p.add(seed, &format!("{base}.wv"), &[kv_width, q_width], Init::Fan(kv_width));
    p.add(seed, &format!("{base}.wo"), &[q_width, q_width], Init::Fan(q_width));
}

fn add_ffn(p: &mut Params, seed: u64, base: &str, dim: usize) {
    p.add(seed, &format!("{base}.w1"), &[dim, 4 * dim], Init::Fan(dim));
    p.add(seed, &format!("{base}.b1"), &[4 * dim], Init::Zeros);
    p.add(seed, &format!("{base}.w2"), &[4 * dim, dim], Init::Fan(4 * dim));
    p.add(seed, &format!("{base}.b2"), &[dim], Init::Zeros);
}
