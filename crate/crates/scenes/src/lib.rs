//! Synthetic driving scenes: procedurally rendered two-resolution rasters,
//! a single "highest risk" object with its normalized box, and a four-clause
//! caption that is a pure function of the scene's attributes.
//!
//! The corpus is a stand-in for a real dashcam dataset at desk scale: small
//! enough to regenerate in seconds, structured enough that a captioner and a
//! box regressor trained on it have something real to learn.

mod error;
mod generate;
mod io;
mod render;
mod templates;
mod types;

pub use error::{Result, SceneError};
pub use generate::{generate, generate_one, sample_layout, split};
pub use io::{read_jsonl, record_from_line, record_to_line, write_jsonl, JsonlWriter, SCHEMA_VERSION};
pub use render::{background_rgb, draw_background, draw_shape, DISTRACTOR_COLORS};
pub use templates::{caption_for, template_vocabulary};
pub use types::{
    Category, ColBand, NormBox, ObjectAttrs, ObjectColor, Raster, RowBand, SceneRecord, Scenario,
    CHANNELS, HI_SIDE, LO_SIDE,
};
