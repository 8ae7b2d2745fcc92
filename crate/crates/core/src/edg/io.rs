//! CSV readers and writers for AU tracks (`frame,AU01,...,AU45`) and prosody
//! series (`frame,pitch,loudness,jitter,shimmer`).
//!
//! Malformed rows are skipped and reported with their line number; a file
//! with a bad header or no usable rows is an error.

use std::io::{Read, Write};
use std::path::Path;

use super::{AuTrack, ProsodySeries, ALL_AUS};
use crate::error::{Error, Result};

pub const PROSODY_COLUMNS: [&str; 4] = ["pitch", "loudness", "jitter", "shimmer"];

/// Frame rate assumed for AU exports, which do not record one.
pub const DEFAULT_FRAME_RATE: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowWarning {
    pub line: usize,
    pub reason: String,
}

impl std::fmt::Display for RowWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

fn column_map<const N: usize>(
    headers: &csv::StringRecord,
    wanted: [&str; N],
    origin: &Path,
) -> Result<[usize; N]> {
    let mut idx = [0; N];
    for (slot, name) in idx.iter_mut().zip(wanted) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Malformed {
                path: origin.to_path_buf(),
                line: 1,
                reason: format!("missing column `{name}`"),
            })?;
    }
    Ok(idx)
}

fn read_rows<const N: usize, R: Read>(
    reader: R,
    wanted: [&str; N],
    origin: &Path,
) -> Result<(Vec<[f64; N]>, Vec<RowWarning>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Malformed {
            path: origin.to_path_buf(),
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let cols = column_map(&headers, wanted, origin)?;
    let width = headers.len();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                warnings.push(RowWarning {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            warnings.push(RowWarning {
                line,
                reason: format!("expected {width} fields, found {}", rec.len()),
            });
            continue;
        }
        let mut row = [0.0; N];
        let mut bad = None;
        for (v, (&c, name)) in row.iter_mut().zip(cols.iter().zip(wanted)) {
            match rec[c].parse::<f64>() {
                Ok(x) if x.is_finite() => *v = x,
                _ => {
                    bad = Some(format!("bad value `{}` in column {name}", &rec[c]));
                    break;
                }
            }
        }
        match bad {
            Some(reason) => warnings.push(RowWarning { line, reason }),
            None => rows.push(row),
        }
    }
    if rows.is_empty() {
        return Err(Error::Malformed {
            path: origin.to_path_buf(),
            line: 1,
            reason: "no usable rows".into(),
        });
    }
    Ok((rows, warnings))
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

/// Raw AU intensities, columns in [`ALL_AUS`] order.
pub fn parse_au_intensities<R: Read>(reader: R, origin: &Path) -> Result<(Vec<[f64; 16]>, Vec<RowWarning>)> {
    let names: Vec<String> = ALL_AUS.iter().map(|a| a.to_string()).collect();
    let wanted: [&str; 16] = std::array::from_fn(|i| names[i].as_str());
    read_rows(reader, wanted, origin)
}

pub fn read_au_track(path: &Path, threshold: f64) -> Result<(AuTrack, Vec<RowWarning>)> {
    let (rows, warnings) = parse_au_intensities(open(path)?, path)?;
    Ok((AuTrack::from_intensities(&rows, threshold, DEFAULT_FRAME_RATE)?, warnings))
}

pub fn parse_prosody<R: Read>(reader: R, origin: &Path) -> Result<(ProsodySeries, Vec<RowWarning>)> {
    let (rows, warnings) = read_rows(reader, PROSODY_COLUMNS, origin)?;
    let series = ProsodySeries::from_frames(&rows).map_err(|e| Error::Malformed {
        path: origin.to_path_buf(),
        line: 1,
        reason: e.to_string(),
    })?;
    Ok((series, warnings))
}

pub fn read_prosody(path: &Path) -> Result<(ProsodySeries, Vec<RowWarning>)> {
    parse_prosody(open(path)?, path)
}

fn write_csv<W: Write, const N: usize>(out: W, header: &[String], rows: &[[f64; N]]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for (i, row) in rows.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()
}

pub fn write_au_csv(path: &Path, rows: &[[f64; 16]]) -> Result<()> {
    let mut header = vec!["frame".to_string()];
    header.extend(ALL_AUS.iter().map(|a| a.to_string()));
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(std::io::BufWriter::new(file), &header, rows).map_err(|e| Error::io(path, e))
}

pub fn write_prosody_csv(path: &Path, frames: &[[f64; 4]]) -> Result<()> {
    let mut header = vec!["frame".to_string()];
    header.extend(PROSODY_COLUMNS.iter().map(|s| s.to_string()));
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(std::io::BufWriter::new(file), &header, frames).map_err(|e| Error::io(path, e))
}
