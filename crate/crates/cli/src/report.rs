//! Run outputs: per-seed metric rows, aggregates, and the JSON report.
//!
//! `results.csv` is the deterministic surface: rows sorted by seed, one
//! column per metric, values printed with `f64::to_string` (shortest
//! round-trip form), so identical runs produce identical bytes. Wall-clock
//! timings live only in `report.json`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use cmm_core::{CmmError, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

/// Metrics for one successful seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

/// A seed whose run failed; the error string mirrors the module error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
    pub divergence: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stderr: f64,
}

/// Everything a run produced, echoing the resolved config that made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub rows: Vec<SeedRow>,
    pub aggregates: BTreeMap<String, Aggregate>,
    pub failures: Vec<SeedFailure>,
    /// Files written under the output directory, relative paths.
    pub manifest: Vec<String>,
    /// Seconds; keys are `seed_<n>` plus `total`. Informational only.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            config,
            rows: Vec::new(),
            aggregates: BTreeMap::new(),
            failures: Vec::new(),
            manifest: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    /// Sorts rows by seed and recomputes `aggregates` (mean and standard
    /// error per metric over the successful seeds).
    pub fn finalize(&mut self) {
        self.rows.sort_by_key(|r| r.seed);
        self.failures.sort_by_key(|f| f.seed);
        self.manifest.sort();
        self.aggregates.clear();
        let mut by_metric: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for row in &self.rows {
            for (name, value) in &row.metrics {
                by_metric.entry(name).or_default().push(*value);
            }
        }
        for (name, values) in by_metric {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let stderr = if values.len() > 1 {
                let var =
                    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            self.aggregates.insert(name.to_string(), Aggregate { mean, stderr });
        }
    }

    /// Column set for `results.csv`: union of metric names across rows.
    fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.metrics.keys().cloned())
            .collect();
        cols.sort();
        cols.dedup();
        cols
    }

    pub fn results_to_csv_writer<W: Write>(&self, out: W) -> Result<()> {
        let cols = self.columns();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["seed".to_string()];
        header.extend(cols.iter().cloned());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut record = vec![row.seed.to_string()];
            for col in &cols {
                let v = row.metrics.get(col).copied().unwrap_or(f64::NAN);
                record.push(v.to_string());
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_results_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.results_to_csv_writer(file)
    }

    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| CmmError::Parse(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CmmError::Parse(e.to_string()))
    }

    pub fn from_json_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Reads a `results.csv` back into seed rows. Inverse of
/// [`RunReport::results_to_csv_writer`] for every table the runner emits.
pub fn read_results_csv<R: Read>(input: R) -> Result<Vec<SeedRow>> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers().map_err(|e| CmmError::Parse(e.to_string()))?;
    if headers.iter().next() != Some("seed") {
        return Err(CmmError::Parse(format!(
            "results csv must start with a `seed` column, got {:?}",
            headers.iter().next().unwrap_or("")
        )));
    }
    let cols: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CmmError::Parse(format!("row {i}: {e}")))?;
        let mut fields = record.iter();
        let seed: u64 = fields
            .next()
            .ok_or_else(|| CmmError::Parse(format!("row {i}: missing seed")))?
            .parse()
            .map_err(|e| CmmError::Parse(format!("row {i}: bad seed: {e}")))?;
        let mut metrics = BTreeMap::new();
        for (col, raw) in cols.iter().zip(fields) {
            let value: f64 = raw
                .parse()
                .map_err(|e| CmmError::Parse(format!("row {i}, {col}: {e}")))?;
            metrics.insert(col.clone(), value);
        }
        if metrics.len() != cols.len() {
            return Err(CmmError::Parse(format!("row {i}: wrong field count")));
        }
        rows.push(SeedRow { seed, metrics });
    }
    Ok(rows)
}

pub fn read_results_csv_path<P: AsRef<Path>>(path: P) -> Result<Vec<SeedRow>> {
    read_results_csv(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> RunReport {
        let config = ExperimentConfig::default_for_kind("ivr-linear").unwrap();
        let mut report = RunReport::new(config);
        for (seed, a, b) in [(3u64, 1.5, -0.25), (1, 0.5, 0.75)] {
            let mut metrics = BTreeMap::new();
            metrics.insert("alpha".to_string(), a);
            metrics.insert("beta".to_string(), b);
            report.rows.push(SeedRow { seed, metrics });
        }
        report.finalize();
        report
    }

    #[test]
    fn finalize_sorts_and_aggregates() {
        let report = sample_report();
        assert_eq!(report.rows[0].seed, 1);
        let alpha = report.aggregates["alpha"];
        assert!((alpha.mean - 1.0).abs() < 1e-15);
        // sample std of {0.5, 1.5} is 1/sqrt(2), stderr halves the var again
        assert!((alpha.stderr - 0.5).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trips_exactly() {
        let report = sample_report();
        let mut buf = Vec::new();
        report.results_to_csv_writer(&mut buf).unwrap();
        let rows = read_results_csv(buf.as_slice()).unwrap();
        assert_eq!(rows, report.rows);
    }

    #[test]
    fn csv_bytes_are_stable() {
        let report = sample_report();
        let mut a = Vec::new();
        let mut b = Vec::new();
        report.results_to_csv_writer(&mut a).unwrap();
        report.results_to_csv_writer(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trips() {
        let report = sample_report();
        let text = report.to_json_string().unwrap();
        let back = RunReport::from_json_str(&text).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn csv_rejects_missing_seed_column() {
        let err = read_results_csv("alpha,beta\n1,2\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("seed"));
    }
}
