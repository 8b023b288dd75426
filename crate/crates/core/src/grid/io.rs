//! Field serialization: little-endian `f64` payload plus a JSON sidecar.

use super::{ScalarField, TimeGrid, TorusGrid};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Sidecar describing the layout of a `.bin` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub dim: usize,
    #[serde(rename = "M")]
    pub points: usize,
    #[serde(rename = "K")]
    pub steps: Option<usize>,
    pub t0: Option<f64>,
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn write_field(stem: &Path, field: &ScalarField) -> Result<()> {
    let header = FieldHeader {
        dim: field.grid().dim(),
        points: field.grid().points(),
        steps: field.time().map(|t| t.steps()),
        t0: field.time().map(|t| t.t0()),
        horizon: field.time().map(|t| t.horizon()),
    };
    let mut bytes = Vec::with_capacity(field.values().len() * 8);
    for v in field.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(with_ext(stem, "bin"), bytes)?;
    fs::write(with_ext(stem, "json"), serde_json::to_vec_pretty(&header)?)?;
    Ok(())
}

pub fn read_field(stem: &Path) -> Result<ScalarField> {
    let header: FieldHeader = serde_json::from_slice(&fs::read(with_ext(stem, "json"))?)?;
    let bytes = fs::read(with_ext(stem, "bin"))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::shape("payload length is not a multiple of 8"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let grid = TorusGrid::new(header.dim, header.points)?;
    match (header.steps, header.t0, header.horizon) {
        (Some(k), Some(t0), Some(t)) => ScalarField::space_time(grid, TimeGrid::new(t0, t, k)?, values),
        (None, None, None) => ScalarField::spatial(grid, values),
        _ => Err(Error::shape("sidecar has a partial time grid")),
    }
}

/// `x,value` rows for time slice `k` of a one-dimensional field.
pub fn write_slice_csv(path: &Path, field: &ScalarField, k: usize) -> Result<()> {
    if field.grid().dim() != 1 {
        return Err(Error::UnsupportedDimension {
            dim: field.grid().dim(),
            hint: "CSV slices are one-dimensional".into(),
        });
    }
    let mut out = fs::File::create(path)?;
    writeln!(out, "x,value")?;
    let slice = field.slice(k);
    for (i, v) in slice.iter().enumerate() {
        writeln!(out, "{},{}", field.grid().coord(i, 0), v)?;
    }
    Ok(())
}
