use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::RunReport;
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

/// Header of the adaptation report CSV.
pub const REPORT_HEADER: [&str; 7] = [
    "config_id",
    "corruption",
    "severity",
    "accuracy",
    "mean_threshold",
    "batches",
    "seed",
];

/// Corruption name used by the per-config summary row.
pub const MEAN_ROW: &str = "mean";

/// One line of the adaptation report.
///
/// Summary rows carry `corruption = "mean"`, an empty severity and the total
/// batch count. `mean_threshold` is empty for losses without thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config_id: String,
    pub corruption: String,
    pub severity: Option<u8>,
    pub accuracy: f64,
    pub mean_threshold: Option<f64>,
    pub batches: usize,
    pub seed: u64,
}

/// Rounds to 6 significant digits, the precision of every reported float.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

/// Rows for each report in order, each followed by its summary row.
pub fn report_rows(reports: &[RunReport]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for report in reports {
        let id = &report.config.id;
        for r in &report.corruptions {
            rows.push(ReportRow {
                config_id: id.clone(),
                corruption: r.corruption.kind.name().to_string(),
                severity: Some(r.corruption.severity),
                accuracy: round_sig(r.accuracy),
                mean_threshold: r.mean_threshold.map(round_sig),
                batches: r.batches,
                seed: report.seed,
            });
        }
        let thresholds: Option<Vec<f64>> = report.corruptions.iter().map(|r| r.mean_threshold).collect();
        rows.push(ReportRow {
            config_id: id.clone(),
            corruption: MEAN_ROW.to_string(),
            severity: None,
            accuracy: round_sig(report.mean_accuracy),
            mean_threshold: thresholds
                .filter(|t| !t.is_empty())
                .map(|t| round_sig(t.iter().sum::<f64>() / t.len() as f64)),
            batches: report.corruptions.iter().map(|r| r.batches).sum(),
            seed: report.seed,
        });
    }
    rows
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(REPORT_HEADER).map_err(csv_error)?;
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn rows_from_csv(bytes: &[u8]) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(csv_error)?;
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::Format(format!("unexpected report header {header:?}")));
    }
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ReportRow>, _>>()
        .map_err(csv_error)?;
    if let Some(bad) = rows.iter().find(|row| !(0.0..=1.0).contains(&row.accuracy)) {
        return Err(Error::Format(format!("accuracy {} outside [0, 1]", bad.accuracy)));
    }
    Ok(rows)
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    write_atomic(path, &rows_to_csv(rows)?)
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    rows_from_csv(&std::fs::read(path)?)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Accuracy table of the known-complementary-label experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoTable {
    pub negatives: Vec<usize>,
    pub rows: Vec<DemoRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoRow {
    pub replicate: usize,
    /// Test accuracy per negative count, in `negatives` order.
    pub accuracies: Vec<f64>,
    pub baseline: f64,
}

impl DemoTable {
    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self.negatives.iter().map(|n| format!("N={n}")).collect();
        cols.push("baseline".into());
        cols
    }

    /// Column means over replicates, baseline last.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.rows.len() as f64;
        (0..=self.negatives.len())
            .map(|k| {
                self.rows
                    .iter()
                    .map(|r| r.accuracies.get(k).copied().unwrap_or(r.baseline))
                    .sum::<f64>()
                    / n
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["replicate".to_string()];
        header.extend(self.columns());
        w.write_record(&header).map_err(csv_error)?;
        let fmt = |v: f64| round_sig(v).to_string();
        for row in &self.rows {
            let mut rec = vec![row.replicate.to_string()];
            rec.extend(row.accuracies.iter().map(|&a| fmt(a)));
            rec.push(fmt(row.baseline));
            w.write_record(&rec).map_err(csv_error)?;
        }
        let mut rec = vec![MEAN_ROW.to_string()];
        rec.extend(self.mean().into_iter().map(fmt));
        w.write_record(&rec).map_err(csv_error)?;
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }
}

impl fmt::Display for DemoTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<10}", "replicate")?;
        for c in self.columns() {
            write!(f, "{c:>10}")?;
        }
        writeln!(f)?;
        for row in &self.rows {
            write!(f, "{:<10}", row.replicate)?;
            for a in row.accuracies.iter().chain([&row.baseline]) {
                write!(f, "{a:>10.4}")?;
            }
            writeln!(f)?;
        }
        write!(f, "{MEAN_ROW:<10}")?;
        for a in self.mean() {
            write!(f, "{a:>10.4}")?;
        }
        writeln!(f)
    }
}
