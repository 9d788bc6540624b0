//! Dual emission: an aligned text table on stdout and one JSON object per
//! line in the output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mcpflow_core::Result;
use serde_json::Value;

pub struct Report {
    pub file: &'static str,
    pub table: String,
    pub records: Vec<Value>,
}

impl Report {
    pub fn new(file: &'static str) -> Self {
        Report {
            file,
            table: String::new(),
            records: Vec::new(),
        }
    }

    pub fn line(&mut self, s: impl AsRef<str>) {
        self.table.push_str(s.as_ref());
        self.table.push('\n');
    }

    pub fn record(&mut self, v: Value) {
        self.records.push(v);
    }

    /// Writes the records file, then prints the table unless `quiet`.
    /// The table is printed only after the records are safely on disk.
    pub fn emit(&self, out_dir: &Path, quiet: bool) -> Result<PathBuf> {
        let path = out_dir.join(self.file);
        let mut text = String::new();
        for r in &self.records {
            text.push_str(&r.to_string());
            text.push('\n');
        }
        fs::write(&path, text)?;
        if !quiet {
            let mut out = std::io::stdout().lock();
            out.write_all(self.table.as_bytes())?;
            out.flush()?;
        }
        Ok(path)
    }
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, var.sqrt())
}
