//! Column-oriented experiment results and their CSV form.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Significant digits written for every number.
pub const CSV_DIGITS: usize = 12;

/// Rows of numbers under a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
}

impl McResult {
    pub fn new(columns: &[&'static str]) -> Self {
        Self {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width does not match header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| *c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    /// Value of `name` in row `row`; panics on an unknown column.
    pub fn get(&self, row: usize, name: &str) -> f64 {
        let k = self
            .columns
            .iter()
            .position(|c| *c == name)
            .unwrap_or_else(|| panic!("no column {name}"));
        self.rows[row][k]
    }
}

/// `v` with [`CSV_DIGITS`] significant digits in scientific notation.
pub fn format_number(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{:.*e}", CSV_DIGITS - 1, v)
    }
}

pub fn write_csv<W: Write>(result: &McResult, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&result.columns)?;
    for row in &result.rows {
        w.write_record(row.iter().map(|v| format_number(*v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(result: &McResult, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_csv(result, file).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })
}
