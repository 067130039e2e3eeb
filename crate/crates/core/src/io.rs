//! CSV output with a fixed float format so reruns are byte-identical.
//!
//! Floats are written with the shortest representation that parses back to
//! the same `f64`: plain decimal for magnitudes in `[1e-4, 1e15)` (and zero),
//! scientific otherwise. Non-finite values are written as `inf`, `-inf`, `NaN`.
//! A file may start with `#`-prefixed comment lines carrying metadata.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if !v.is_finite() || a == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Writes string records under optional comment lines and a header row.
pub fn write_records<I>(path: &Path, comments: &[String], header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = BufWriter::new(File::create(path)?);
    for c in comments {
        writeln!(file, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table<I>(path: &Path, comments: &[String], header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    write_records(path, comments, header, rows.into_iter().map(|r| r.into_iter().map(fmt_f64).collect()))
}

/// A numeric CSV table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub comments: Vec<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path)?;
    let mut comments = Vec::new();
    let mut body_start = 0;
    for line in text.split_inclusive('\n') {
        match line.strip_prefix('#') {
            Some(c) => {
                comments.push(c.trim().to_string());
                body_start += line.len();
            }
            None => break,
        }
    }
    let mut reader = csv::Reader::from_reader(&text.as_bytes()[body_start..]);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("{}: bad number `{s}`: {e}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(Table { comments, header, rows })
}
