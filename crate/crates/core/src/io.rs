//! Commented-CSV artifacts: one `# {json}` metadata line, a column header,
//! then data rows. Floats are written with Rust's shortest round-trip
//! formatting so re-reading a file reproduces the values bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Stamp identifying the producing software, embedded in every artifact.
pub fn version_stamp() -> String {
    format!("phasescope {VERSION}")
}

pub struct CsvTable {
    pub header: Value,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn new(header: Value, columns: &[&str]) -> Self {
        Self {
            header,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.header);
        let _ = writeln!(out, "{}", self.columns.join(","));
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, self.render())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let meta = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or_else(|| Error::Parse("missing `# {json}` metadata line".into()))?;
        let header: Value = serde_json::from_str(meta)?;
        let columns: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Parse("missing column header".into()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("row {}: {e}", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != columns.len() {
                return Err(Error::Parse(format!(
                    "row {} has {} fields, expected {}",
                    n + 1,
                    row.len(),
                    columns.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self {
            header,
            columns,
            rows,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Parse(format!("no column `{name}`")))?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn floats_survive_a_round_trip() {
        let mut t = CsvTable::new(json!({"a": 1}), &["x", "y"]);
        t.push(vec![0.1 + 0.2, -1e-300]);
        t.push(vec![f64::MAX, 3.0]);
        let back = CsvTable::parse(&t.render()).unwrap();
        assert_eq!(back.rows, t.rows);
        assert_eq!(back.header["a"], 1);
        assert_eq!(back.column("y").unwrap(), vec![-1e-300, 3.0]);
    }

    #[test]
    fn malformed_rows_are_rejected() {
        assert!(CsvTable::parse("# {}\nx,y\n1\n").is_err());
        assert!(CsvTable::parse("x,y\n1,2\n").is_err());
    }
}
