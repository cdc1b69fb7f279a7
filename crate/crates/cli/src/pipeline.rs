//! The run pipeline: data generation, two training stages, evaluation,
//! report. Each step reads and writes a fixed-layout run directory
//!
//! ```text
//! <run>/config.json   the RunConfig that governs everything below
//! <run>/data/         train.jsonl, val.jsonl, test.jsonl
//! <run>/ckpt-stage1   caption model + tokenizer
//! <run>/ckpt-stage2   + trained localization stack, stage-1 file hash
//! <run>/report.json   metrics, config hash, checkpoint hashes
//! <run>/table.txt     one-row metric table (sweeps overwrite with many)
//! <run>/log.txt       deterministic progress log (no wall-clock anywhere)
//! ```
//!
//! so the steps compose: the subcommands run them one at a time against the
//! same directory, `run_pipeline` chains them in-process. Everything is a
//! pure function of the config — rerunning any step reproduces its outputs
//! byte for byte.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use drivecap_metrics::{render_table, Conventions, MetricReport};
use drivecap_model::checkpoint::{file_hash, hash_hex, Checkpoint};
use drivecap_model::decode::{argmax, Decoder};
use drivecap_model::lm::{compose_sequence, inner_pieces, prompt_ids};
use drivecap_model::regressor::regress;
use drivecap_model::tokenizer::Tokenizer;
use drivecap_model::train::{
    fused_tensor, precompute, scene_vars, train_stage1, train_stage2, train_tokenizer,
    SceneFeatures, StageLog,
};
use drivecap_model::{build_params, ModelConfig, RegressionInput};
use drivecap_scenes::{generate, read_jsonl, split, write_jsonl, SceneRecord};
use drivecap_tensor::Tape;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{at, HarnessError, Result};

/// Fixed-scale reference results this code explicitly does not reproduce.
/// Stamped into every report so the numbers next to it cannot be mistaken
/// for comparable ones.
pub const PUBLISHED_CONTEXT: &str = "Reference MLLM-SUL results on the DRAMA-SRIS benchmark \
    (BLEU-1 80.1, BLEU-4 65.2, METEOR 45.7, CIDEr 298.5, mIoU 59.6, Acc(IoU>0.5) 64.4) are not \
    reproducible by this code base: they depend on LLaMA-2-7B, large pretrained vision \
    backbones, and the licensed DRAMA dataset. All metrics in this report come from synthetic \
    scenes and a small language model trained from scratch; they exercise the training and \
    evaluation machinery and are not comparable to the published numbers.";

/// File layout inside one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        RunPaths { root: root.to_path_buf() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn split_file(&self, name: &str) -> PathBuf {
        self.data_dir().join(format!("{name}.jsonl"))
    }
    pub fn ckpt_stage1(&self) -> PathBuf {
        self.root.join("ckpt-stage1")
    }
    pub fn ckpt_stage2(&self) -> PathBuf {
        self.root.join("ckpt-stage2")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn table(&self) -> PathBuf {
        self.root.join("table.txt")
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("log.txt")
    }
}

/// Progress log: every line goes to `<run>/log.txt` and to the caller's
/// echo closure. Lines carry no timestamps — the log file is part of the
/// deterministic run output. File write failures are swallowed (the log
/// is advisory; the run itself must not die on a full disk mid-epoch).
pub struct RunLog<'a> {
    file: Option<fs::File>,
    echo: &'a mut dyn FnMut(&str),
}

impl<'a> RunLog<'a> {
    /// Truncate and start fresh (full pipeline runs).
    pub fn create(path: &Path, echo: &'a mut dyn FnMut(&str)) -> Result<Self> {
        Ok(RunLog { file: Some(fs::File::create(path)?), echo })
    }

    /// Continue an existing log (single-step subcommands).
    pub fn append(path: &Path, echo: &'a mut dyn FnMut(&str)) -> Result<Self> {
        Ok(RunLog {
            file: Some(fs::OpenOptions::new().create(true).append(true).open(path)?),
            echo,
        })
    }

    /// Echo-only log for callers without a run directory.
    pub fn ephemeral(echo: &'a mut dyn FnMut(&str)) -> Self {
        RunLog { file: None, echo }
    }

    pub fn line(&mut self, s: &str) {
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{s}");
        }
        (self.echo)(s);
    }
}

/// The three record partitions, in memory.
pub struct DataSplits {
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

/// Everything `report.json` holds. Serialization is deterministic (fixed
/// field order, no timestamps), so identical configs yield byte-identical
/// reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub published_context: String,
    pub eval: EvalSummary,
    pub checkpoints: CheckpointHashes,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHashes {
    pub stage1: String,
    pub stage2: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_test: usize,
    /// Percent of test records whose decoded first clause matches the
    /// reference scenario sentence exactly.
    pub scenario_accuracy: f64,
    /// Teacher-forced next-token accuracy over answer positions, percent.
    pub token_accuracy: f64,
    /// Records whose greedy decode came back empty (their localization
    /// fell back to the reference caption).
    pub empty_decodes: usize,
    pub metrics: MetricReport,
}

/// Validate the config and set up the run directory. An existing
/// `config.json` must match exactly — mixing artifacts from different
/// configs in one directory is the one mistake this layout cannot survive.
pub fn prepare_run_dir(cfg: &RunConfig, out: &Path) -> Result<RunPaths> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let paths = RunPaths::new(out);
    let mut pretty = serde_json::to_string_pretty(cfg).expect("config serialization is infallible");
    pretty.push('\n');
    if paths.config().exists() {
        let existing = fs::read_to_string(paths.config())?;
        if existing != pretty {
            return Err(HarnessError::Config(format!(
                "{} already holds a different config; use a fresh directory",
                paths.config().display()
            )));
        }
    } else {
        fs::write(paths.config(), &pretty)?;
    }
    Ok(paths)
}

/// Read the config governing an existing run directory.
pub fn load_run_config(dir: &Path) -> Result<RunConfig> {
    let path = RunPaths::new(dir).config();
    let text = fs::read_to_string(&path).map_err(|e| {
        HarnessError::Config(format!("cannot read {}: {e}", path.display()))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("bad config at {}: {e}", path.display())))
}

/// Load cached splits if all three exist, otherwise generate and persist
/// them. Generation and split are seeded, so cached and fresh data agree.
pub fn ensure_data(cfg: &RunConfig, paths: &RunPaths, log: &mut RunLog) -> Result<DataSplits> {
    const S: &str = "gen-data";
    let files = ["train", "val", "test"].map(|n| paths.split_file(n));
    if files.iter().all(|p| p.exists()) {
        let train = read_jsonl(&files[0]).map_err(at(S))?;
        let val = read_jsonl(&files[1]).map_err(at(S))?;
        let test = read_jsonl(&files[2]).map_err(at(S))?;
        log.line(&format!(
            "data: loaded cached splits, train/val/test = {}/{}/{}",
            train.len(),
            val.len(),
            test.len()
        ));
        return Ok(DataSplits { train, val, test });
    }

    fs::create_dir_all(paths.data_dir()).map_err(at(S))?;
    let records = generate(cfg.model.seed, cfg.n_scenes).map_err(at(S))?;
    let (train, val, test) = split(records, cfg.split, cfg.model.seed).map_err(at(S))?;
    write_jsonl(&train, &files[0]).map_err(at(S))?;
    write_jsonl(&val, &files[1]).map_err(at(S))?;
    write_jsonl(&test, &files[2]).map_err(at(S))?;
    log.line(&format!(
        "data: generated {} scenes (seed {}), train/val/test = {}/{}/{}",
        cfg.n_scenes,
        cfg.model.seed,
        train.len(),
        val.len(),
        test.len()
    ));
    Ok(DataSplits { train, val, test })
}

/// Train the caption model and write `ckpt-stage1`.
pub fn run_stage1(
    cfg: &RunConfig,
    paths: &RunPaths,
    data: &DataSplits,
    log: &mut RunLog,
) -> Result<StageLog> {
    const S: &str = "stage1";
    let m = &cfg.model;
    let feats_train = precompute(m, &data.train).map_err(at(S))?;
    let feats_val = precompute(m, &data.val).map_err(at(S))?;
    let captions: Vec<String> = data.train.iter().map(|r| r.caption_text()).collect();
    let tok = train_tokenizer(m, &captions).map_err(at(S))?;
    let mut params = build_params(m, tok.vocab()).map_err(at(S))?;
    log.line(&format!(
        "stage 1: {} pieces, {} parameter values",
        tok.vocab(),
        params.total_values()
    ));

    let mut sink = |s: &str| log.line(s);
    let slog = train_stage1(
        &mut params,
        m,
        &tok,
        &feats_train,
        &feats_val,
        &cfg.stage1,
        &mut sink,
    )
    .map_err(at(S))?;

    Checkpoint::stage1(m.clone(), tok.state(), params)
        .save(&paths.ckpt_stage1())
        .map_err(at(S))?;
    log.line("stage 1: checkpoint written");
    Ok(slog)
}

/// Train the localization stack on top of the frozen stage-1 checkpoint
/// and write `ckpt-stage2`.
pub fn run_stage2(
    cfg: &RunConfig,
    paths: &RunPaths,
    data: &DataSplits,
    log: &mut RunLog,
) -> Result<StageLog> {
    const S: &str = "stage2";
    let m = &cfg.model;
    let ck1 = Checkpoint::load(&paths.ckpt_stage1()).map_err(at(S))?;
    if ck1.config != *m {
        return Err(HarnessError::Stage {
            stage: S,
            message: "stage-1 checkpoint was trained under a different model config".into(),
        });
    }
    let stage1_hash = file_hash(&paths.ckpt_stage1()).map_err(at(S))?;
    let tok = Tokenizer::from_state(ck1.tokenizer);
    let feats_train = precompute(m, &data.train).map_err(at(S))?;
    let feats_val = precompute(m, &data.val).map_err(at(S))?;

    let mut params = ck1.params;
    let mut sink = |s: &str| log.line(s);
    let slog = train_stage2(
        &mut params,
        m,
        &tok,
        &feats_train,
        &feats_val,
        &cfg.stage2,
        &mut sink,
    )
    .map_err(at(S))?;

    Checkpoint::stage2(m.clone(), tok.state(), params, stage1_hash)
        .save(&paths.ckpt_stage2())
        .map_err(at(S))?;
    log.line("stage 2: checkpoint written");
    Ok(slog)
}

/// Caption + localization outputs for one record under final parameters.
pub struct RecordEval {
    pub id: String,
    pub reference: String,
    pub decoded: String,
    pub gt_box: [f64; 4],
    pub pred_box: [f64; 4],
    pub token_hits: usize,
    pub token_total: usize,
    pub scenario_hit: bool,
    pub empty_decode: bool,
}

/// Everything measurable about one test record: greedy caption, clause and
/// token accuracy, and the predicted box (from the decoded caption, like
/// deployment — the reference text is used only if the decode is empty).
pub fn eval_record(
    params: &drivecap_model::Params,
    m: &ModelConfig,
    tok: &Tokenizer,
    feats: &SceneFeatures,
) -> drivecap_model::Result<RecordEval> {
    let fused = fused_tensor(params, m, feats)?;

    let prompt = prompt_ids(tok);
    let room = m.context.saturating_sub(prompt.len());
    let gen = drivecap_model::decode::greedy_decode(params, m, &prompt, Some(&fused), room)?;
    let decoded = tok.decode(&gen);

    // Teacher-forced pass over the reference sequence; answer positions only.
    let (ids, prompt_len) = compose_sequence(tok, &feats.caption);
    let mut dec = Decoder::new(params, m, Some(&fused))?;
    let (mut hits, mut total) = (0usize, 0usize);
    for i in 0..ids.len() - 1 {
        let logits = dec.feed(ids[i])?;
        if i + 1 >= prompt_len {
            total += 1;
            if argmax(&logits) == ids[i + 1] {
                hits += 1;
            }
        }
    }

    let empty_decode = gen.is_empty();
    let cap_ids = if empty_decode { inner_pieces(tok, &feats.caption) } else { gen };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &|_| false);
    let vars = scene_vars(&mut tape, feats);
    let out = regress(&mut tape, &bound, m, &vars, &cap_ids, None)?;
    let pred = tape.to_tensor(out.box_pred);

    Ok(RecordEval {
        id: feats.id.clone(),
        reference: feats.caption.clone(),
        scenario_hit: first_clause(&decoded) == feats.scenario_clause,
        decoded,
        gt_box: feats.gt_box,
        pred_box: [pred.data[0], pred.data[1], pred.data[2], pred.data[3]],
        token_hits: hits,
        token_total: total,
        empty_decode,
    })
}

/// Evaluate the stage-2 checkpoint on the test split and write
/// `report.json` plus a one-row `table.txt`.
pub fn run_eval(
    cfg: &RunConfig,
    paths: &RunPaths,
    data: &DataSplits,
    log: &mut RunLog,
) -> Result<RunReport> {
    const S: &str = "eval";
    let m = &cfg.model;
    let ck2 = Checkpoint::load(&paths.ckpt_stage2()).map_err(at(S))?;
    if ck2.config != *m {
        return Err(HarnessError::Stage {
            stage: S,
            message: "stage-2 checkpoint was trained under a different model config".into(),
        });
    }
    let tok = Tokenizer::from_state(ck2.tokenizer.clone());
    let feats = precompute(m, &data.test).map_err(at(S))?;
    if feats.is_empty() {
        return Err(HarnessError::Stage { stage: S, message: "empty test split".into() });
    }

    let mut candidates = Vec::with_capacity(feats.len());
    let mut references = Vec::with_capacity(feats.len());
    let mut box_pairs = Vec::with_capacity(feats.len());
    let (mut scenario_hits, mut token_hits, mut token_total) = (0usize, 0usize, 0usize);
    let mut empty_decodes = 0usize;
    for f in &feats {
        let r = eval_record(&ck2.params, m, &tok, f).map_err(at(S))?;
        scenario_hits += usize::from(r.scenario_hit);
        token_hits += r.token_hits;
        token_total += r.token_total;
        empty_decodes += usize::from(r.empty_decode);
        candidates.push(r.decoded);
        references.push(r.reference);
        box_pairs.push((r.gt_box, r.pred_box));
    }

    let metrics = MetricReport::compute(&candidates, &references, &box_pairs, Conventions::default())
        .map_err(at(S))?;
    let eval = EvalSummary {
        n_test: feats.len(),
        scenario_accuracy: 100.0 * scenario_hits as f64 / feats.len() as f64,
        token_accuracy: if token_total == 0 {
            0.0
        } else {
            100.0 * token_hits as f64 / token_total as f64
        },
        empty_decodes,
        metrics,
    };
    log.line(&format!(
        "eval: n {}  scenario {:.1}%  token {:.1}%  B4 {:.1}  mIoU {:.1}  Acc@0.5 {:.1}  AVG {:.2}",
        eval.n_test,
        eval.scenario_accuracy,
        eval.token_accuracy,
        eval.metrics.b4,
        eval.metrics.miou,
        eval.metrics.acc_05,
        eval.metrics.avg
    ));

    const R: &str = "report";
    let report = RunReport {
        config_hash: cfg.hash(),
        seed: m.seed,
        published_context: PUBLISHED_CONTEXT.to_string(),
        eval,
        checkpoints: CheckpointHashes {
            stage1: hash_hex(&file_hash(&paths.ckpt_stage1()).map_err(at(R))?),
            stage2: hash_hex(&file_hash(&paths.ckpt_stage2()).map_err(at(R))?),
        },
        config: cfg.clone(),
    };
    let mut json = serde_json::to_string_pretty(&report).expect("report serialization is infallible");
    json.push('\n');
    fs::write(paths.report(), json).map_err(at(R))?;

    let table = render_table(&[(variant_label(m), report.eval.metrics.clone())]);
    fs::write(paths.table(), table).map_err(at(R))?;
    log.line("report: written");
    Ok(report)
}

/// Run every stage in order against `out`. Fails fast with the stage name;
/// artifacts from completed stages stay behind for inspection.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, echo: &mut dyn FnMut(&str)) -> Result<RunReport> {
    let paths = prepare_run_dir(cfg, out)?;
    let mut log = RunLog::create(&paths.log(), echo)?;
    log.line(&format!("run: config hash {}", cfg.hash()));
    let data = ensure_data(cfg, &paths, &mut log)?;
    run_stage1(cfg, &paths, &data, &mut log)?;
    run_stage2(cfg, &paths, &data, &mut log)?;
    run_eval(cfg, &paths, &data, &mut log)
}

/// Human label for a config's ablation position: "full model" for the
/// defaults, otherwise the axes it deviates on.
pub fn variant_label(m: &ModelConfig) -> String {
    let mut parts: Vec<String> = Vec::new();
    if !m.use_lo {
        parts.push("w/o lo branch".into());
    }
    if !m.use_hi {
        parts.push("w/o hi branch".into());
    }
    if !m.use_gate {
        parts.push("concat fusion".into());
    }
    match m.regression_input {
        RegressionInput::LoGrid => {}
        RegressionInput::HiGrid => parts.push("hi-grid regression input".into()),
        RegressionInput::Concat => parts.push("lo+hi-grid regression input".into()),
        RegressionInput::Detector => parts.push("detector regression input".into()),
    }
    if parts.is_empty() {
        "full model".into()
    } else {
        parts.join(", ")
    }
}

/// First sentence of a decoded caption (everything through the first
/// period), used for scenario exact-match.
pub fn first_clause(text: &str) -> &str {
    match text.find('.') {
        Some(i) => text[..=i].trim(),
        None => text.trim(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_clause_stops_at_the_first_period() {
        let t = "the ego car drives along a conventional urban road . the highest risk object is";
        assert_eq!(first_clause(t), "the ego car drives along a conventional urban road .");
        assert_eq!(first_clause("no period here"), "no period here");
        assert_eq!(first_clause(""), "");
    }

    #[test]
    fn variant_labels_name_the_deviation() {
        let mut m = ModelConfig::default();
        assert_eq!(variant_label(&m), "full model");
        m.use_hi = false;
        assert_eq!(variant_label(&m), "w/o hi branch");
        m.use_hi = true;
        m.use_gate = false;
        m.regression_input = RegressionInput::Detector;
        assert_eq!(variant_label(&m), "concat fusion, detector regression input");
    }

    #[test]
    fn run_dir_guards_against_config_mixups() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        prepare_run_dir(&cfg, dir.path()).unwrap();
        // Same config again: fine.
        prepare_run_dir(&cfg, dir.path()).unwrap();
        // Different config into the same directory: refused.
        let mut other = RunConfig::default();
        other.n_scenes = 7;
        assert!(prepare_run_dir(&other, dir.path()).is_err());
    }
}
