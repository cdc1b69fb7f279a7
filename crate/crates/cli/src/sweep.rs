//! Ablation sweeps: run the base config plus one variant per requested
//! axis, each in its own subdirectory, and render a shared comparison
//! table. A failing variant is reported and skipped — the sweep always
//! finishes and always writes the table for whatever succeeded.

use std::fs;
use std::path::Path;

use drivecap_metrics::render_table;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::pipeline::{run_pipeline, RunReport};

/// One togglable deviation from the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    /// Drop the low-resolution grid branch from caption fusion.
    DropLoBranch,
    /// Drop the high-resolution grid branch from caption fusion.
    DropHiBranch,
    /// Replace gate-attention fusion with concatenation + projection.
    GateToConcat,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [
        AblationAxis::DropLoBranch,
        AblationAxis::DropHiBranch,
        AblationAxis::GateToConcat,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationAxis::DropLoBranch => "w/o lo branch",
            AblationAxis::DropHiBranch => "w/o hi branch",
            AblationAxis::GateToConcat => "concat fusion",
        }
    }

    /// Directory-name form of the label.
    pub fn slug(self) -> &'static str {
        match self {
            AblationAxis::DropLoBranch => "wo-lo-branch",
            AblationAxis::DropHiBranch => "wo-hi-branch",
            AblationAxis::GateToConcat => "concat-fusion",
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            AblationAxis::DropLoBranch => cfg.model.use_lo = false,
            AblationAxis::DropHiBranch => cfg.model.use_hi = false,
            AblationAxis::GateToConcat => cfg.model.use_gate = false,
        }
        cfg
    }
}

/// The full model plus one variant per axis. Empty axes ⇒ just the base.
pub fn ablation_variants(
    base: &RunConfig,
    axes: &[AblationAxis],
) -> Vec<(&'static str, &'static str, RunConfig)> {
    let mut variants = vec![("full model", "full-model", base.clone())];
    for &axis in axes {
        variants.push((axis.label(), axis.slug(), axis.apply(base)));
    }
    variants
}

pub struct SweepRow {
    pub label: String,
    /// Subdirectory (under the sweep root) the variant ran in.
    pub dir: String,
    pub outcome: std::result::Result<RunReport, String>,
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// The rendered comparison table, as written to `<out>/table.txt`.
    pub table: String,
}

impl SweepOutcome {
    /// Whether the full model's AVG is >= every successful ablation's.
    /// `None` when the comparison is impossible (base failed, or no
    /// ablation finished).
    pub fn full_model_leads(&self) -> Option<bool> {
        let full = self.rows.first()?.outcome.as_ref().ok()?.eval.metrics.avg;
        let others: Vec<f64> = self.rows[1..]
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok())
            .map(|rep| rep.eval.metrics.avg)
            .collect();
        if others.is_empty() {
            return None;
        }
        Some(others.iter().all(|&a| full >= a))
    }
}

/// Run the base config and one variant per axis under `out/<slug>/`,
/// then write `out/table.txt`. Per-variant failures are recorded in the
/// rows and the table; they never halt the sweep.
pub fn ablation_sweep(
    base: &RunConfig,
    axes: &[AblationAxis],
    out: &Path,
    echo: &mut dyn FnMut(&str),
) -> Result<SweepOutcome> {
    base.validate()?;
    fs::create_dir_all(out)?;

    let mut rows = Vec::new();
    for (label, slug, cfg) in ablation_variants(base, axes) {
        echo(&format!("sweep: running `{label}`"));
        let outcome = run_pipeline(&cfg, &out.join(slug), echo).map_err(|e| e.to_string());
        if let Err(msg) = &outcome {
            echo(&format!("sweep: `{label}` failed: {msg}"));
        }
        rows.push(SweepRow { label: label.to_string(), dir: slug.to_string(), outcome });
    }

    let table = render_sweep_table(&rows);
    fs::write(out.join("table.txt"), &table)?;
    Ok(SweepOutcome { rows, table })
}

fn render_sweep_table(rows: &[SweepRow]) -> String {
    let ok_rows: Vec<(String, drivecap_metrics::MetricReport)> = rows
        .iter()
        .filter_map(|r| {
            r.outcome
                .as_ref()
                .ok()
                .map(|rep| (r.label.clone(), rep.eval.metrics.clone()))
        })
        .collect();
    let mut table = render_table(&ok_rows);
    for r in rows {
        if let Err(msg) = &r.outcome {
            table.push_str(&format!("\n{}: FAILED — {}\n", r.label, msg));
        }
    }
    if let (Some(first), true) = (rows.first(), rows.len() > 1) {
        if let Ok(full) = &first.outcome {
            let verdict = rows[1..]
                .iter()
                .filter_map(|r| r.outcome.as_ref().ok())
                .all(|rep| full.eval.metrics.avg >= rep.eval.metrics.avg);
            table.push_str(&format!(
                "\nfull-model AVG {} every completed ablation's AVG\n",
                if verdict { "is >=" } else { "is NOT >=" }
            ));
        }
    }
    table
}
