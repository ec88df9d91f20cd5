//! Experiment outputs: per-seed metrics, aggregates, plot-ready tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::mean_sd;
use crate::error::Result;
use crate::spectral::write_atomic;

pub const RESULT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: String,
    pub seed: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: impl Into<String>, columns: &[&str]) -> Self {
        Table {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_columns(name: impl Into<String>, columns: Vec<String>) -> Self {
        Table {
            name: name.into(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub tag: String,
    /// Resolved configuration as key/value pairs.
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub values: Vec<MetricValue>,
    pub tables: Vec<Table>,
}

impl ExperimentResult {
    pub fn new(tag: impl Into<String>, seeds: &[u64]) -> Self {
        ExperimentResult {
            tag: tag.into(),
            config: BTreeMap::new(),
            seeds: seeds.to_vec(),
            values: Vec::new(),
            tables: Vec::new(),
        }
    }

    pub fn echo(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn record(&mut self, metric: impl Into<String>, seed: u64, value: f64) {
        self.values.push(MetricValue {
            metric: metric.into(),
            seed,
            value,
        });
    }

    /// Metric names in first-recorded order.
    pub fn metrics(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for v in &self.values {
            if !names.contains(&v.metric) {
                names.push(v.metric.clone());
            }
        }
        names
    }

    pub fn per_seed(&self, metric: &str) -> Vec<(u64, f64)> {
        self.values
            .iter()
            .filter(|v| v.metric == metric)
            .map(|v| (v.seed, v.value))
            .collect()
    }

    pub fn values_of(&self, metric: &str) -> Vec<f64> {
        self.per_seed(metric).into_iter().map(|(_, v)| v).collect()
    }

    /// (mean, sample sd, count) over seeds.
    pub fn aggregate(&self, metric: &str) -> Option<(f64, f64, usize)> {
        let vals = self.values_of(metric);
        if vals.is_empty() {
            return None;
        }
        let (m, s) = mean_sd(&vals);
        Some((m, s, vals.len()))
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn merge(&mut self, other: ExperimentResult) {
        for s in other.seeds {
            if !self.seeds.contains(&s) {
                self.seeds.push(s);
            }
        }
        self.values.extend(other.values);
        self.tables.extend(other.tables);
        for (k, v) in other.config {
            self.config.entry(k).or_insert(v);
        }
    }

    /// Self-describing text: config echo, per-seed values, aggregates and a
    /// list of tables. Table contents go to separate CSV files.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# experiment {}", self.tag);
        let _ = writeln!(out, "# format_version {RESULT_FORMAT_VERSION}");
        let _ = writeln!(out, "[config]");
        for (k, v) in &self.config {
            let _ = writeln!(out, "{k} = {v}");
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "\n[seeds]\n{}", seeds.join(","));
        let _ = writeln!(out, "\n[values]\nmetric,seed,value");
        for v in &self.values {
            let _ = writeln!(out, "{},{},{}", v.metric, v.seed, v.value);
        }
        let _ = writeln!(out, "\n[aggregate]\nmetric,mean,sd,n");
        for name in self.metrics() {
            let (m, s, n) = self.aggregate(&name).expect("recorded");
            let _ = writeln!(out, "{name},{m},{s},{n}");
        }
        if !self.tables.is_empty() {
            let _ = writeln!(out, "\n[tables]");
            for t in &self.tables {
                let _ = writeln!(out, "{} rows={} file={}", t.name, t.rows.len(), self.table_file(t));
            }
        }
        out
    }

    /// Comment lines heading every table file.
    fn csv_preamble(&self) -> String {
        let mut out = format!("# {} format_version={RESULT_FORMAT_VERSION}\n", self.tag);
        if let Some(d) = self.config.get("config_digest") {
            let _ = writeln!(out, "# config_digest={d}");
        }
        out
    }

    fn table_file(&self, t: &Table) -> String {
        format!("{}_{}.csv", self.tag, t.name)
    }

    /// Writes `<tag>.txt` and one CSV per table into `dir`, atomically.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let main = dir.join(format!("{}.txt", self.tag));
        write_atomic(&main, self.to_text().as_bytes())?;
        written.push(main);
        for t in &self.tables {
            let path = dir.join(self.table_file(t));
            write_atomic(&path, (self.csv_preamble() + &t.to_csv()).as_bytes())?;
            written.push(path);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregates_recompute_from_values() {
        let mut r = ExperimentResult::new("t", &[1, 2, 3]);
        r.echo("m", 5);
        for (s, v) in [(1, 0.5), (2, 0.7), (3, 0.9)] {
            r.record("auc", s, v);
        }
        let (m, sd, n) = r.aggregate("auc").unwrap();
        assert!((m - 0.7).abs() < 1e-15 && (sd - 0.2).abs() < 1e-12 && n == 3);
        assert!(r.aggregate("missing").is_none());
        let text = r.to_text();
        assert!(text.contains("m = 5"));
        assert!(text.contains("[seeds]\n1,2,3"));
        assert!(text.contains("auc,2,0.7"));
    }

    #[test]
    fn writes_text_and_tables() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ExperimentResult::new("demo", &[0]);
        let mut t = Table::new("curve", &["x", "score"]);
        t.push(vec![0.0, 1.5]);
        t.push(vec![1.0, 2.5]);
        r.tables.push(t);
        let files = r.write(dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let csv = std::fs::read_to_string(dir.path().join("demo_curve.csv")).unwrap();
        assert_eq!(csv, "# demo format_version=1\nx,score\n0,1.5\n1,2.5\n");
        assert_eq!(r.table("curve").unwrap().column("score").unwrap(), vec![1.5, 2.5]);
    }
}
