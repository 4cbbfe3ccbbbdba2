//! CSV ingestion and delimited-text output.
//!
//! Panels are stored with dates in rows and series in columns: a header of
//! series labels after a date column, then one row per date.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use nalgebra::DMatrix;

use crate::error::{FsvError, Result};
use crate::model::ReturnsPanel;

/// 17 significant digits; parses back to the identical double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> FsvError {
    FsvError::Parse {
        line,
        column,
        message: message.into(),
    }
}

/// Reads a panel; line and column numbers in errors are 1-based.
pub fn load_returns_csv(path: &Path, demean: bool) -> Result<ReturnsPanel> {
    let file = File::open(path).map_err(|e| FsvError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut records = reader.records();
    let header = match records.next() {
        Some(rec) => rec.map_err(|e| csv_err(&e))?,
        None => return Err(parse_err(1, 1, "empty file")),
    };
    let labels: Vec<String> = header
        .iter()
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    if labels.is_empty() {
        return Err(parse_err(1, 2, "header has no series labels"));
    }
    let mut seen = HashSet::new();
    for (k, l) in labels.iter().enumerate() {
        if !seen.insert(l.as_str()) {
            return Err(parse_err(1, k + 2, format!("duplicate series label '{l}'")));
        }
    }
    let width = labels.len() + 1;
    let mut dates = Vec::new();
    let mut body: Vec<f64> = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_err(&e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(parse_err(
                line,
                rec.len().min(width) + 1,
                format!("expected {width} cells, found {}", rec.len()),
            ));
        }
        dates.push(rec[0].trim().to_string());
        for (k, cell) in rec.iter().enumerate().skip(1) {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(parse_err(
                    line,
                    k + 1,
                    format!("missing value for series '{}'", labels[k - 1]),
                ));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, k + 1, format!("non-numeric value '{cell}'")))?;
            if !v.is_finite() {
                return Err(parse_err(line, k + 1, format!("non-finite value '{cell}'")));
            }
            body.push(v);
        }
    }
    if dates.is_empty() {
        return Err(parse_err(2, 1, "no data rows"));
    }
    let values = DMatrix::from_row_slice(dates.len(), labels.len(), &body).transpose();
    let mut panel = ReturnsPanel::new(values, labels, dates)?;
    if demean {
        panel.demean();
    }
    info!(
        "loaded {}: m = {}, T = {}",
        path.display(),
        panel.n_series(),
        panel.n_dates()
    );
    Ok(panel)
}

fn csv_err(e: &csv::Error) -> FsvError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    parse_err(line, 0, e.to_string())
}

/// Inverse of [`load_returns_csv`] (without demeaning).
pub fn write_returns_csv(path: &Path, panel: &ReturnsPanel) -> Result<()> {
    let mut header = vec!["date".to_string()];
    header.extend(panel.series_labels.iter().cloned());
    let rows = (0..panel.n_dates()).map(|t| {
        let mut row = vec![panel.date_labels[t].clone()];
        row.extend(panel.values.column(t).iter().map(|&v| fmt_f64(v)));
        row
    });
    write_table(path, &header, rows)
}

/// Writes a header and string rows as comma-separated text.
pub fn write_table<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let file = File::create(path).map_err(|e| FsvError::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let io_err = |e: csv::Error| FsvError::io(path, std::io::Error::other(e.to_string()));
    w.write_record(header).map_err(io_err)?;
    for row in rows {
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| FsvError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| FsvError::io(path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| FsvError::io(path, e))
}

/// A matrix in panel layout: rows of the returned matrix are the CSV columns.
pub fn load_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    load_returns_csv(path, false).map(|p| p.values)
}
