//! CSV reports with JSON sidecars.
//!
//! Accuracies are written as percentages with two decimals. Transfer and
//! source accuracy are rounded first; `mean` and `drop` are then computed
//! from the rounded values, so every row satisfies its defining equations
//! to within 0.01 after reloading.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::harness::{ExperimentReport, SweepReport};
use crate::knn::{AccuracyUnit, ForgettingRecord};

pub const REPORT_HEADER: [&str; 6] = [
    "strategy",
    "trainable_params",
    "transfer_acc",
    "source_acc",
    "mean",
    "drop",
];

/// A parsed report line; accuracies in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: String,
    pub trainable_params: usize,
    pub transfer_acc: f64,
    pub source_acc: f64,
    pub mean: f64,
    pub drop: f64,
}

/// Percent in integer hundredths, rounded half away from zero.
fn hundredths(value: f64, unit: AccuracyUnit) -> i64 {
    let scale = match unit {
        AccuracyUnit::Fraction => 10_000.0,
        AccuracyUnit::Percent => 100.0,
    };
    (value * scale).round() as i64
}

fn fmt_hundredths(h: i64) -> String {
    let sign = if h < 0 { "-" } else { "" };
    format!("{sign}{}.{:02}", h.abs() / 100, h.abs() % 100)
}

/// `[transfer, source, mean, drop]` formatted for a report row.
pub fn format_record(record: &ForgettingRecord) -> [String; 4] {
    let u = record.unit;
    let t = hundredths(record.transfer_acc, u);
    let s = hundredths(record.source_acc_after, u);
    let b = hundredths(record.source_acc_before, u);
    // half-up on the sum of two non-negative values
    let mean = (t + s + 1).div_euclid(2);
    [t, s, mean, b - s].map(fmt_hundredths)
}

/// Sidecar path for a report: same stem, `.json` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `path` (CSV, rows in strategy order) and its JSON sidecar.
pub fn emit_report(report: &ExperimentReport, path: &Path) -> Result<()> {
    if report.rows.is_empty() {
        bail!(Input, "report has no rows");
    }
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            let mut line = vec![r.strategy.to_string(), r.trainable_params.to_string()];
            line.extend(format_record(&r.record));
            line
        })
        .collect();
    write_csv(path, &REPORT_HEADER, &rows)?;
    write_json(&sidecar_path(path), report)
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?;
    if header.iter().ne(REPORT_HEADER) {
        bail!(Format, "{}: unexpected header {header:?}", path.display());
    }
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

pub const SWEEP_HEADER: [&str; 8] = [
    "series",
    "p",
    "lr",
    "trainable_params",
    "transfer_acc",
    "source_acc",
    "mean",
    "drop",
];

/// Writes the sweep grid; the last row is the unchanged-backbone baseline.
pub fn emit_sweep(report: &SweepReport, path: &Path) -> Result<()> {
    if report.cells.is_empty() {
        bail!(Input, "sweep has no cells");
    }
    let mut rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            let mut line = vec![
                format!("blockexp-p{}", c.p),
                c.p.to_string(),
                c.lr.to_string(),
                c.trainable_params.to_string(),
            ];
            line.extend(format_record(&c.record));
            line
        })
        .collect();
    let base = fmt_hundredths(hundredths(report.baseline, AccuracyUnit::Fraction));
    rows.push(vec![
        "baseline".into(),
        String::new(),
        String::new(),
        "0".into(),
        String::new(),
        base,
        String::new(),
        "0.00".into(),
    ]);
    write_csv(path, &SWEEP_HEADER, &rows)?;
    write_json(&sidecar_path(path), report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::forgetting_report;

    #[test]
    fn table_arithmetic() {
        let r = forgetting_report(76.11, 74.61, 88.58, AccuracyUnit::Percent).unwrap();
        assert_eq!(
            format_record(&r),
            ["88.58", "74.61", "81.60", "1.50"].map(String::from)
        );
        let r = forgetting_report(76.11, 25.24, 88.13, AccuracyUnit::Percent).unwrap();
        assert_eq!(format_record(&r)[2], "56.69");
        let r = forgetting_report(0.5, 0.75, 0.25, AccuracyUnit::Fraction).unwrap();
        assert_eq!(
            format_record(&r),
            ["25.00", "75.00", "50.00", "-25.00"].map(String::from)
        );
    }

    #[test]
    fn thirds_round() {
        let r = forgetting_report(2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, AccuracyUnit::Fraction).unwrap();
        assert_eq!(
            format_record(&r),
            ["33.33", "33.33", "33.33", "33.34"].map(String::from)
        );
    }
}
