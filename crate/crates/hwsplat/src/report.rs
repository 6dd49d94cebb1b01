//! Text + CSV reports. Both carry the full run configuration: the text as a
//! header block, the CSV as a leading `# run_config {json}` comment line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hwsplat_core::precision::StorageFormat;
use hwsplat_core::reduction::ReductionConfig;
use hwsplat_core::sim::PackingPolicy;
use serde::Serialize;

use crate::error::{IoError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    /// PLY path, or `synthetic` when the scene was generated.
    pub scene: String,
    pub camera: Option<PathBuf>,
    pub out: PathBuf,
    pub format: StorageFormat,
    pub reduction: ReductionConfig,
    pub packing: PackingPolicy,
    pub subgroup_size: usize,
    pub resolution: Option<(u32, u32)>,
    pub seed: u64,
    pub threads: usize,
    pub t_culling: bool,
    pub early_quad_termination: bool,
    /// Synthetic splat count, when the scene is generated.
    pub splats: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self { headers: headers.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    fn render(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(String::len).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:>w$}")).collect();
            padded.join("  ").trim_end().to_string()
        };
        let mut out = line(&self.headers) + "\n";
        for row in &self.rows {
            out += &line(row);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub title: String,
    pub config: RunConfig,
    pub summary: Vec<(String, String)>,
    pub table: Table,
}

impl Report {
    pub fn new(title: &str, config: &RunConfig, table: Table) -> Self {
        Self { title: title.to_string(), config: config.clone(), summary: Vec::new(), table }
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    pub fn config_json(&self) -> String {
        serde_json::to_string(&self.config).expect("config serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\nrun config: {}\n", self.title, self.config_json());
        for (k, v) in &self.summary {
            let _ = writeln!(out, "{k}: {v}");
        }
        if !self.table.headers.is_empty() {
            out.push('\n');
            out += &self.table.render();
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.table.headers).expect("in-memory csv");
        for row in &self.table.rows {
            w.write_record(row).expect("in-memory csv");
        }
        let body = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv");
        format!("# run_config {}\n{body}", self.config_json())
    }

    /// Writes `<stem>.txt` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        for (ext, text) in [("txt", self.to_text()), ("csv", self.to_csv())] {
            let path = dir.join(format!("{stem}.{ext}"));
            fs::write(&path, text).map_err(|e| IoError::io(&path, e))?;
        }
        Ok(())
    }
}

/// Reads a report CSV back as `(config json, headers, rows)`.
pub fn read_csv(path: &Path) -> Result<(String, Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
    let config = first.strip_prefix("# run_config ").ok_or_else(|| IoError::parse(path, "missing run_config line"))?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let headers = r.headers().map_err(|e| IoError::parse(path, e.to_string()))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| IoError::parse(path, e.to_string()))?;
    Ok((config.to_string(), headers, rows))
}
