//! CSV series files: optional header, optional leading timestamp column.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use koopkal_core::data::SeriesDataset;

use crate::error::{CliError, Result};

/// Reads a comma-separated numeric file into a dataset. A first row with
/// any non-numeric cell is treated as the header.
pub fn load_csv(path: &Path, has_timestamp: bool) -> Result<SeriesDataset> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(file);
    let skip = usize::from(has_timestamp);
    let mut names: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    let at = |line: u64, msg: String| CliError::config(format!("{}: line {line}: {msg}", path.display()));
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
            at(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
        if record.len() <= skip {
            return Err(at(line, "no value columns".into()));
        }
        let cells: Vec<&str> = record.iter().skip(skip).collect();
        if let Some(w) = width {
            if cells.len() != w {
                return Err(at(line, format!("expected {w} values, found {}", cells.len())));
            }
        }
        let parsed: std::result::Result<Vec<f64>, _> = cells.iter().map(|c| c.parse::<f64>()).collect();
        match parsed {
            Err(_) if i == 0 => names = Some(cells.iter().map(|c| c.to_string()).collect()),
            Err(_) => {
                let bad = cells.iter().find(|c| c.parse::<f64>().is_err()).unwrap();
                return Err(at(line, format!("non-numeric cell {bad:?}")));
            }
            Ok(values) => {
                if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                    return Err(at(line, format!("non-finite value {v}")));
                }
                rows.push(values);
            }
        }
        width = Some(cells.len());
    }
    let width = width.ok_or_else(|| CliError::config(format!("{}: file is empty", path.display())))?;
    if rows.is_empty() {
        return Err(CliError::config(format!("{}: no data rows", path.display())));
    }
    let names = names.unwrap_or_else(|| (0..width).map(|i| format!("x{i}")).collect());
    Ok(SeriesDataset::from_rows(names, &rows)?)
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a header row of variable names, then one row per time step.
pub fn write_csv(path: &Path, ds: &SeriesDataset) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CliError::io(path, e);
    writeln!(w, "{}", ds.names.join(",")).map_err(io)?;
    for t in 0..ds.steps() {
        let row: Vec<String> = (0..ds.n_vars()).map(|v| format_f64(ds.value(v, t))).collect();
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}
