use crate::config::{ExperimentConfig, Format};
use anyhow::Context;
use serde::Serialize;
use serde_json::Value;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Bumped whenever a CSV header or a metric name changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

pub type Metrics = BTreeMap<String, Value>;

#[derive(Debug, Serialize)]
pub struct Provenance {
    pub toolkit: &'static str,
    pub version: &'static str,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct ResultRecord {
    pub subcommand: String,
    pub schema_version: u32,
    /// `ok`, `assertion_failed` or `error`.
    pub status: &'static str,
    pub config: Value,
    pub metrics: Metrics,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub tables: Vec<String>,
    pub provenance: Provenance,
    pub wall_clock_seconds: f64,
}

impl ResultRecord {
    pub fn new(subcommand: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            schema_version: SCHEMA_VERSION,
            status: "ok",
            config: serde_json::to_value(cfg).expect("config serializes"),
            metrics: Metrics::new(),
            failures: Vec::new(),
            error: None,
            tables: Vec::new(),
            provenance: Provenance {
                toolkit: env!("CARGO_PKG_NAME"),
                version: env!("CARGO_PKG_VERSION"),
                seed: cfg.seed,
            },
            wall_clock_seconds: 0.0,
        }
    }
}

/// Tabular data destined for one file in the output directory.
pub struct Table {
    pub name: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: impl Into<String>, header: &[&'static str]) -> Self {
        Self {
            name: name.into(),
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

pub struct OutputDir {
    pub dir: PathBuf,
    format: Format,
}

impl OutputDir {
    pub fn create(dir: PathBuf, format: Format) -> anyhow::Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir, format })
    }

    /// Writes `table` as CSV or as a JSON array of row objects; returns the
    /// file name.
    pub fn write_table(&self, table: &Table) -> anyhow::Result<String> {
        match self.format {
            Format::Csv => {
                let file = format!("{}.csv", table.name);
                let mut w = csv::Writer::from_path(self.dir.join(&file))?;
                w.write_record(&table.header)?;
                for row in &table.rows {
                    w.write_record(row)?;
                }
                w.flush()?;
                Ok(file)
            }
            Format::Json => {
                let file = format!("{}.json", table.name);
                let rows: Vec<BTreeMap<&str, Value>> = table
                    .rows
                    .iter()
                    .map(|row| {
                        table
                            .header
                            .iter()
                            .zip(row)
                            .map(|(h, v)| (*h, cell_value(v)))
                            .collect()
                    })
                    .collect();
                write_json(&self.dir.join(&file), &rows)?;
                Ok(file)
            }
        }
    }

    pub fn write_record(&self, record: &ResultRecord) -> anyhow::Result<()> {
        write_json(&self.dir.join("result.json"), record)
    }
}

fn cell_value(s: &str) -> Value {
    if let Ok(i) = s.parse::<i64>() {
        return Value::from(i);
    }
    match s.parse::<f64>() {
        Ok(f) if f.is_finite() => Value::from(f),
        _ => Value::from(s),
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
