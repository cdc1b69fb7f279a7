//! JSONL persistence, schema v1. One record per line; rasters travel as
//! base64-encoded raw bytes next to their declared shape.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SceneError};
use crate::types::{NormBox, ObjectAttrs, Raster, SceneRecord, Scenario, CHANNELS};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WireRaster {
    shape: [usize; 3],
    b64: String,
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    id: String,
    schema_version: u32,
    scenario: Scenario,
    caption: [String; 4],
    #[serde(rename = "box")]
    box_: [f64; 4],
    object_attrs: ObjectAttrs,
    raster_lo: WireRaster,
    raster_hi: WireRaster,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

fn pack_raster(r: &Raster) -> WireRaster {
    WireRaster {
        shape: [r.height, r.width, CHANNELS],
        b64: B64.encode(&r.data),
    }
}

fn unpack_raster(w: &WireRaster, line: usize) -> Result<Raster> {
    let data = B64
        .decode(&w.b64)
        .map_err(|source| SceneError::Base64 { line, source })?;
    let expected = w.shape.iter().product::<usize>();
    if data.len() != expected {
        return Err(SceneError::RasterLength {
            line,
            got: data.len(),
            expected,
        });
    }
    Ok(Raster {
        height: w.shape[0],
        width: w.shape[1],
        data,
    })
}

/// Serialize one record to its JSONL line (no trailing newline).
pub fn record_to_line(rec: &SceneRecord) -> String {
    let wire = WireRecord {
        id: rec.id.clone(),
        schema_version: SCHEMA_VERSION,
        scenario: rec.scenario,
        caption: rec.caption.clone(),
        box_: rec.box_.as_array(),
        object_attrs: rec.object_attrs,
        raster_lo: pack_raster(&rec.raster_lo),
        raster_hi: pack_raster(&rec.raster_hi),
    };
    serde_json::to_string(&wire).expect("record serialization is infallible")
}

/// Parse one JSONL line; `line_no` is 1-based and only used for errors.
pub fn record_from_line(line: &str, line_no: usize) -> Result<SceneRecord> {
    let probe: VersionProbe = serde_json::from_str(line).map_err(|source| SceneError::Parse {
        line: line_no,
        source,
    })?;
    if probe.schema_version != SCHEMA_VERSION {
        return Err(SceneError::SchemaVersion {
            line: line_no,
            found: probe.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let wire: WireRecord = serde_json::from_str(line).map_err(|source| SceneError::Parse {
        line: line_no,
        source,
    })?;
    let rec = SceneRecord {
        id: wire.id,
        scenario: wire.scenario,
        caption: wire.caption,
        box_: NormBox::from_array(wire.box_)?,
        object_attrs: wire.object_attrs,
        raster_lo: unpack_raster(&wire.raster_lo, line_no)?,
        raster_hi: unpack_raster(&wire.raster_hi, line_no)?,
    };
    Ok(rec)
}

pub fn write_jsonl(records: &[SceneRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        writeln!(w, "{}", record_to_line(rec))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SceneRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(record_from_line(&line, i + 1)?);
    }
    Ok(out)
}

/// Streaming writer for corpora too large to hold as a Vec of rasters.
pub struct JsonlWriter {
    inner: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlWriter {
            inner: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, rec: &SceneRecord) -> Result<()> {
        writeln!(self.inner, "{}", record_to_line(rec))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}
