//! CSV tables written between pipeline stages.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::{read_bytes, write_bytes};

/// One row of the patch manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRow {
    pub image_id: String,
    pub sp_id: u32,
    pub coverage: f64,
    /// Empty when no defect annotation exists.
    pub defect_label: Option<bool>,
}

/// One row of the scores table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub image_id: String,
    pub sp_id: u32,
    pub score: f64,
    pub flagged: bool,
    /// Residual value that maps to 255 in the patch's heatmap PNG.
    pub heatmap_scale: f32,
}

/// Patch and heatmap file name for a superpixel.
pub fn patch_file_name(image_id: &str, sp_id: u32) -> String {
    format!("{image_id}_{sp_id}.png")
}

pub fn encode_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()).into())
}

pub fn decode_csv<T: DeserializeOwned>(bytes: &[u8]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_bytes(path, &encode_csv(rows)?)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    decode_csv(&read_bytes(path)?)
}
