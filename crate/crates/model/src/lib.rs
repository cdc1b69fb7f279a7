//! Joint scene-caption and risk-box model on synthetic driving scenes.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod layers;
pub mod lm;
pub mod losses;
pub mod params;
pub mod regressor;
pub mod tokenizer;
pub mod train;
pub mod verify;

pub use config::{ModelConfig, RegressionInput, RegressionText};
pub use error::{ModelError, Result};
pub use params::{build_params, stage1_trainable, stage2_trainable, Bound, OptState, Params};
