//! Minimal CSV writer/reader for the fixed-header numeric tables this crate emits.
//!
//! Fields never contain commas or quotes, so no quoting is needed.

use crate::error::{Error, Result};

/// Twelve significant digits, scientific notation. Empty for `None`.
pub fn real(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    format!("{v:.11e}")
}

pub fn opt_real(v: Option<f64>) -> String {
    v.map(real).unwrap_or_default()
}

/// Fixed six-decimal coordinate, used for lattice exports.
pub fn coord(v: f64) -> String {
    format!("{v:.6}")
}

pub fn parse_real(s: &str, line: usize) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Csv {
        line,
        message: format!("bad number `{s}`"),
    })
}

pub fn parse_opt_real(s: &str, line: usize) -> Result<Option<f64>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse_real(s, line).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses `text`, requiring the exact header given.
    pub fn parse(text: &str, header: &[&str]) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines.next().ok_or(Error::Csv {
            line: 1,
            message: "missing header".into(),
        })?;
        let got: Vec<&str> = head.split(',').collect();
        if got != header {
            return Err(Error::Csv {
                line: 1,
                message: format!("expected header `{}`, got `{head}`", header.join(",")),
            });
        }
        let mut rows = Vec::new();
        for (i, l) in lines.enumerate() {
            if l.is_empty() {
                continue;
            }
            let fields: Vec<String> = l.split(',').map(str::to_string).collect();
            if fields.len() != header.len() {
                return Err(Error::Csv {
                    line: i + 2,
                    message: format!("expected {} fields, got {}", header.len(), fields.len()),
                });
            }
            rows.push(fields);
        }
        Ok(Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows,
        })
    }
}
