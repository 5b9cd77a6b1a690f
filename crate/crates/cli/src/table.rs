//! Result tables written as CSV behind a `#` metadata header.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::config::ExperimentConfig;

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    pass: Vec<bool>,
}

impl Table {
    /// A `pass` column is appended to `columns`.
    pub fn new(columns: &[&str]) -> Self {
        let mut header: Vec<String> = columns.iter().map(|c| c.to_string()).collect();
        header.push("pass".into());
        Self { header, rows: Vec::new(), pass: Vec::new() }
    }

    pub fn push(&mut self, cells: Vec<String>, pass: bool) {
        debug_assert_eq!(cells.len() + 1, self.header.len());
        self.rows.push(cells);
        self.pass.push(pass);
    }

    pub fn passed(&self) -> bool {
        self.pass.iter().all(|&p| p)
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    pub fn write<W: Write>(&self, cfg: &ExperimentConfig, elapsed: Duration, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# experiment: {}", cfg.experiment)?;
        writeln!(out, "# version: {}", env!("CARGO_PKG_VERSION"))?;
        for (k, v) in cfg.echo() {
            writeln!(out, "# {k} = {v}")?;
        }
        writeln!(out, "# wall_time_s: {:.3}", elapsed.as_secs_f64())?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for (row, pass) in self.rows.iter().zip(&self.pass) {
            let mut r = row.clone();
            r.push(pass.to_string());
            w.write_record(&r)?;
        }
        w.flush()
    }

    /// Writes `<dir>/<experiment>.csv`, creating `dir` as needed.
    pub fn save(&self, cfg: &ExperimentConfig, elapsed: Duration, dir: &Path) -> std::io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.csv", cfg.experiment));
        self.write(cfg, elapsed, fs::File::create(&path)?)?;
        Ok(path)
    }
}

/// Shortest round-trip formatting for data cells.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}
