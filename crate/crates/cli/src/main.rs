//! `drivecap`: command-line front end. Every flag maps onto a RunConfig
//! field; nothing is read from the environment, so a command line plus a
//! config file fully determines a run.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use drivecap_cli::config::RunConfig;
use drivecap_cli::error::{HarnessError, Result};
use drivecap_cli::pipeline::{
    ensure_data, eval_record, load_run_config, prepare_run_dir, run_eval, run_pipeline,
    run_stage1, run_stage2, RunLog, RunPaths,
};
use drivecap_cli::sweep::{ablation_sweep, AblationAxis};
use drivecap_model::checkpoint::Checkpoint;
use drivecap_model::tokenizer::Tokenizer;
use drivecap_model::train::{precompute, CaptionSource};
use drivecap_model::{RegressionInput, RegressionText};

#[derive(Parser)]
#[command(name = "drivecap", version, about = "Scene captioning + risk-box localization runs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate (or verify) the dataset splits of a run directory.
    GenData(RunArgs),
    /// Train the caption model and write ckpt-stage1.
    TrainStage1(RunArgs),
    /// Train the localization stack over a frozen ckpt-stage1.
    TrainStage2(RunArgs),
    /// Evaluate ckpt-stage2 on the test split; write report.json/table.txt.
    Eval(RunArgs),
    /// Print decoded captions (and boxes, given ckpt-stage2) for test records.
    Decode {
        #[command(flatten)]
        run: RunArgs,
        /// How many test records to show.
        #[arg(long, default_value_t = 5)]
        limit: usize,
    },
    /// Finite-difference verification of both end-to-end losses.
    GradCheck {
        /// Seeds 0..N to check.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Maximum acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Full pipeline: gen-data, stage 1, stage 2, eval, report.
    Run(RunArgs),
    /// Run the base config plus one variant per ablation axis.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated subset of {lo, hi, gate}; defaults to all three.
        #[arg(long, value_delimiter = ',')]
        axes: Option<Vec<String>>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Run-config JSON. Defaults to <out>/config.json when present,
    /// otherwise the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    over: Overrides,
}

/// Field-level overrides applied on top of the resolved config.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Total scene count before splitting.
    #[arg(long, alias = "count")]
    scenes: Option<usize>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    stage1_batch: Option<usize>,
    #[arg(long)]
    stage2_batch: Option<usize>,
    /// Drop the low-resolution fusion branch.
    #[arg(long)]
    no_lo: bool,
    /// Drop the high-resolution fusion branch.
    #[arg(long)]
    no_hi: bool,
    /// Use concatenation + projection instead of gate-attention.
    #[arg(long)]
    no_gate: bool,
    /// Localization input: detector | hi-grid | concat | lo-grid.
    #[arg(long)]
    regression_input: Option<String>,
    /// Localization text features: embeddings | hidden.
    #[arg(long)]
    regression_text: Option<String>,
    /// Stage-2 caption tokens: decoded | ground-truth.
    #[arg(long)]
    caption_source: Option<String>,
}

fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("bad config at {}: {e}", path.display())))?
    } else if RunPaths::new(&args.out).config().exists() {
        load_run_config(&args.out)?
    } else {
        RunConfig::default()
    };

    let o = &args.over;
    if let Some(v) = o.seed {
        cfg.model.seed = v;
    }
    if let Some(v) = o.scenes {
        cfg.n_scenes = v;
    }
    if let Some(v) = o.stage1_epochs {
        cfg.stage1.epochs = v;
    }
    if let Some(v) = o.stage2_epochs {
        cfg.stage2.epochs = v;
    }
    if let Some(v) = o.stage1_batch {
        cfg.stage1.batch = v;
    }
    if let Some(v) = o.stage2_batch {
        cfg.stage2.batch = v;
    }
    if o.no_lo {
        cfg.model.use_lo = false;
    }
    if o.no_hi {
        cfg.model.use_hi = false;
    }
    if o.no_gate {
        cfg.model.use_gate = false;
    }
    if let Some(s) = &o.regression_input {
        cfg.model.regression_input = match s.as_str() {
            "detector" => RegressionInput::Detector,
            "hi-grid" => RegressionInput::HiGrid,
            "concat" => RegressionInput::Concat,
            "lo-grid" => RegressionInput::LoGrid,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown regression input `{other}` (detector | hi-grid | concat | lo-grid)"
                )))
            }
        };
    }
    if let Some(s) = &o.regression_text {
        cfg.model.regression_text = match s.as_str() {
            "embeddings" => RegressionText::Embeddings,
            "hidden" => RegressionText::Hidden,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown regression text `{other}` (embeddings | hidden)"
                )))
            }
        };
    }
    if let Some(s) = &o.caption_source {
        cfg.stage2.caption_source = match s.as_str() {
            "decoded" => CaptionSource::Decoded,
            "ground-truth" => CaptionSource::GroundTruth,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown caption source `{other}` (decoded | ground-truth)"
                )))
            }
        };
    }
    Ok(cfg)
}

fn parse_axes(axes: &Option<Vec<String>>) -> Result<Vec<AblationAxis>> {
    match axes {
        None => Ok(AblationAxis::ALL.to_vec()),
        Some(list) => list
            .iter()
            .map(|s| match s.trim() {
                "lo" => Ok(AblationAxis::DropLoBranch),
                "hi" => Ok(AblationAxis::DropHiBranch),
                "gate" => Ok(AblationAxis::GateToConcat),
                other => Err(HarnessError::Config(format!(
                    "unknown ablation axis `{other}` (lo | hi | gate)"
                ))),
            })
            .collect(),
    }
}

fn decode_preview(args: &RunArgs, limit: usize) -> Result<()> {
    let cfg = resolve_config(args)?;
    let paths = prepare_run_dir(&cfg, &args.out)?;
    let mut echo = |s: &str| println!("{s}");
    let mut log = RunLog::ephemeral(&mut echo);
    let data = ensure_data(&cfg, &paths, &mut log)?;

    let stage2 = paths.ckpt_stage2().exists();
    let ckpt_path = if stage2 { paths.ckpt_stage2() } else { paths.ckpt_stage1() };
    let ck = Checkpoint::load(&ckpt_path)
        .map_err(|e| HarnessError::Config(format!("no usable checkpoint in run dir: {e}")))?;
    let tok = Tokenizer::from_state(ck.tokenizer.clone());
    let n = limit.min(data.test.len());
    let feats = precompute(&cfg.model, &data.test[..n])
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    for f in &feats {
        let r = eval_record(&ck.params, &cfg.model, &tok, f)
            .map_err(|e| HarnessError::Config(format!("record {}: {e}", f.id)))?;
        println!("{}", r.id);
        println!("  ref: {}", r.reference);
        println!("  out: {}", r.decoded);
        if stage2 {
            println!(
                "  box gt  [{:.3} {:.3} {:.3} {:.3}]  pred [{:.3} {:.3} {:.3} {:.3}]",
                r.gt_box[0],
                r.gt_box[1],
                r.gt_box[2],
                r.gt_box[3],
                r.pred_box[0],
                r.pred_box[1],
                r.pred_box[2],
                r.pred_box[3]
            );
        }
    }
    Ok(())
}

fn grad_check(seeds: u64, tolerance: f64) -> Result<bool> {
    let mut ok = true;
    let mut worst = 0.0_f64;
    for (seed, report) in drivecap_model::verify::check_seeds(0..seeds)
        .map_err(|e| HarnessError::Config(e.to_string()))?
    {
        let pass = report.worst() < tolerance;
        ok &= pass;
        worst = worst.max(report.worst());
        println!(
            "seed {seed:>3}: caption {:.3e}  box {:.3e}  {}",
            report.caption_loss,
            report.box_loss,
            if pass { "ok" } else { "FAIL" }
        );
    }
    println!(
        "worst relative error over {seeds} seeds: {worst:.3e} (tolerance {tolerance:.1e})"
    );
    Ok(ok)
}

fn dispatch(cmd: Cmd) -> Result<bool> {
    let mut echo = |s: &str| println!("{s}");
    match cmd {
        Cmd::GenData(args) => {
            let cfg = resolve_config(&args)?;
            let paths = prepare_run_dir(&cfg, &args.out)?;
            let mut log = RunLog::append(&paths.log(), &mut echo)?;
            ensure_data(&cfg, &paths, &mut log)?;
        }
        Cmd::TrainStage1(args) => {
            let cfg = resolve_config(&args)?;
            let paths = prepare_run_dir(&cfg, &args.out)?;
            let mut log = RunLog::append(&paths.log(), &mut echo)?;
            let data = ensure_data(&cfg, &paths, &mut log)?;
            run_stage1(&cfg, &paths, &data, &mut log)?;
        }
        Cmd::TrainStage2(args) => {
            let cfg = resolve_config(&args)?;
            let paths = prepare_run_dir(&cfg, &args.out)?;
            let mut log = RunLog::append(&paths.log(), &mut echo)?;
            let data = ensure_data(&cfg, &paths, &mut log)?;
            run_stage2(&cfg, &paths, &data, &mut log)?;
        }
        Cmd::Eval(args) => {
            let cfg = resolve_config(&args)?;
            let paths = prepare_run_dir(&cfg, &args.out)?;
            let mut log = RunLog::append(&paths.log(), &mut echo)?;
            let data = ensure_data(&cfg, &paths, &mut log)?;
            run_eval(&cfg, &paths, &data, &mut log)?;
        }
        Cmd::Decode { run, limit } => decode_preview(&run, limit)?,
        Cmd::GradCheck { seeds, tolerance } => return grad_check(seeds, tolerance),
        Cmd::Run(args) => {
            let cfg = resolve_config(&args)?;
            let report = run_pipeline(&cfg, &args.out, &mut echo)?;
            println!(
                "report: {}",
                RunPaths::new(&args.out).report().display()
            );
            println!(
                "B1 {:.1}  B4 {:.1}  M {:.1}  C {:.1}  mIoU {:.1}  Acc@0.5 {:.1}  AVG {:.2}",
                report.eval.metrics.b1,
                report.eval.metrics.b4,
                report.eval.metrics.meteor,
                report.eval.metrics.cider,
                report.eval.metrics.miou,
                report.eval.metrics.acc_05,
                report.eval.metrics.avg
            );
        }
        Cmd::Sweep { run, axes } => {
            let cfg = resolve_config(&run)?;
            let axes = parse_axes(&axes)?;
            let outcome = ablation_sweep(&cfg, &axes, &run.out, &mut echo)?;
            print!("{}", outcome.table);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    match dispatch(cli.cmd) {
        Ok(true) => {
            eprintln!("elapsed: {:.1}s", started.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
