//! CSV and JSON helpers shared by every artifact writer.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces every value bitwise.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

pub fn parse_f64(s: &str) -> Option<f64> {
    match s.trim() {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        t => t.parse().ok(),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// Writes a header plus rows of already-formatted cells.
pub fn write_table<P: AsRef<Path>>(path: P, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV table into (header, rows of cells).
pub fn read_table<P: AsRef<Path>>(path: P) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let header = r.headers()?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_owned).collect());
    }
    Ok((header, rows))
}

pub fn write_matrix<P: AsRef<Path>>(path: P, header: &[String], m: &Array2<f64>) -> Result<()> {
    let rows: Vec<Vec<String>> = m
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| fmt_f64(v)).collect())
        .collect();
    write_table(path, header, &rows)
}

pub fn read_matrix<P: AsRef<Path>>(path: P) -> Result<(Vec<String>, Array2<f64>)> {
    let path = path.as_ref();
    let (header, rows) = read_table(path)?;
    let ncols = header.len();
    let mut flat = Vec::with_capacity(rows.len() * ncols);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::Artifact {
                path: path.to_path_buf(),
                reason: format!("row {i} has {} cells, expected {ncols}", r.len()),
            });
        }
        for cell in r {
            flat.push(parse_f64(cell).ok_or_else(|| Error::Artifact {
                path: path.to_path_buf(),
                reason: format!("row {i}: cannot parse {cell:?}"),
            })?);
        }
    }
    let m = Array2::from_shape_vec((rows.len(), ncols), flat)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((header, m))
}

pub fn write_json<P: AsRef<Path>, T: Serialize>(path: P, value: &T) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<P: AsRef<Path>, T: DeserializeOwned>(path: P) -> Result<T> {
    let s = fs::read_to_string(path.as_ref())?;
    Ok(serde_json::from_str(&s)?)
}
