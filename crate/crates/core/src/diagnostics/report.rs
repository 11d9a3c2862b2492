//! Flat CSV tables and JSON documents for diagnostic results.
//!
//! Every table is a list of serde rows; the header line is the row type's
//! field names, and floats are written in shortest round-trip form so that
//! re-reading a file reproduces the rows exactly.

use std::fs::{self, File};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{MagnitudeTrace, SinkReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeRow {
    /// 0 is the embedding for `post_residual`; blocks are 1-based.
    pub block: usize,
    /// `post_residual` or `block_output`.
    pub series: String,
    pub rank: usize,
    pub magnitude: f64,
    pub token: usize,
    pub channel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrobeniusRow {
    pub block: usize,
    pub channel: usize,
    pub frobenius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenRow {
    pub block: usize,
    pub channel: usize,
    /// 1-based rank by descending magnitude.
    pub rank: usize,
    pub eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkRow {
    pub block: usize,
    pub head: usize,
    /// 1-based key position.
    pub position: usize,
    pub alpha: f64,
}

pub fn magnitude_rows(mt: &MagnitudeTrace) -> Vec<MagnitudeRow> {
    let mut rows = Vec::new();
    let series = [("post_residual", &mt.post_residual, 0), ("block_output", &mt.block_outputs, 1)];
    for (name, states, first) in series {
        for (i, cells) in states.iter().enumerate() {
            for (rank, c) in cells.iter().enumerate() {
                rows.push(MagnitudeRow {
                    block: i + first,
                    series: name.to_string(),
                    rank: rank + 1,
                    magnitude: c.magnitude,
                    token: c.token,
                    channel: c.channel,
                });
            }
        }
    }
    rows
}

pub fn sink_rows(report: &SinkReport) -> Vec<SinkRow> {
    report
        .heads
        .iter()
        .flat_map(|h| {
            h.alpha.iter().enumerate().map(move |(k, &alpha)| SinkRow {
                block: h.block,
                head: h.head,
                position: k + 1,
                alpha,
            })
        })
        .collect()
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let rows = vec![
            FrobeniusRow { block: 2, channel: 0, frobenius: 0.1 + 0.2 },
            FrobeniusRow { block: 2, channel: 1, frobenius: 1e-300 },
            FrobeniusRow { block: 4, channel: 7, frobenius: 12345.678901234567 },
        ];
        write_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("block,channel,frobenius\n"));
        assert_eq!(read_csv::<FrobeniusRow>(&path).unwrap(), rows);
    }

    #[test]
    fn magnitude_rows_cover_every_state() {
        let mt = MagnitudeTrace::from_channel_series(&[1.0, 5.0, -2.0]);
        let rows = magnitude_rows(&mt);
        assert_eq!(rows.iter().filter(|r| r.series == "post_residual").count(), 4);
        assert_eq!(rows.iter().filter(|r| r.series == "block_output").count(), 3);
        assert_eq!(rows.iter().find(|r| r.series == "block_output" && r.block == 3).unwrap().magnitude, 7.0);
    }
}
