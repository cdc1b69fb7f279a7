//! Run harness for the caption + localization model: reproducible run
//! directories, the two-stage training pipeline, evaluation, and ablation
//! sweeps. The binary (`drivecap`) is a thin clap wrapper over this
//! library; the acceptance suite drives the same functions in-process.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod sweep;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
pub use pipeline::{run_pipeline, RunPaths, RunReport};
pub use sweep::{ablation_sweep, AblationAxis};
