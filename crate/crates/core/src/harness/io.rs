use std::fs::File;
use std::io::Read;
use std::path::Path;

use super::{StudyRow, TimingRecord, TimingSummary};
use crate::error::{CelError, Result};
use crate::model::Dataset;

fn csv_error(e: csv::Error) -> CelError {
    let (line, column) = match e.position() {
        Some(p) => (p.line() as usize, 1),
        None => (0, 0),
    };
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CelError::Io(io),
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => CelError::Parse {
            line,
            column,
            message: format!("expected {expected_len} fields, found {len}"),
        },
        other => CelError::Parse {
            line,
            column,
            message: format!("{other:?}"),
        },
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes study rows as CSV. Floats use the shortest representation that
/// parses back to the same value.
pub fn write_table(rows: &[StudyRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let alphas = rows.first().map(|r| r.alpha_levels.clone()).unwrap_or_default();
    let mut header: Vec<String> = [
        "study",
        "distribution",
        "rho",
        "n",
        "method",
        "replicates",
        "failures",
        "flagged",
        "obs_mean",
        "obs_variance",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(alphas.iter().map(|a| format!("reject_{a}")));
    header.extend(["avg_ci_length", "miss_low", "miss_high"].map(String::from));
    w.write_record(&header).map_err(csv_error)?;
    for r in rows {
        let mut rec = vec![
            r.study.to_string(),
            r.distribution.to_string(),
            r.rho.to_string(),
            r.n.to_string(),
            r.method.clone(),
            r.replicates.to_string(),
            r.failures.to_string(),
            r.flagged.to_string(),
            r.obs_mean.to_string(),
            r.obs_variance.to_string(),
        ];
        rec.extend(r.rejection.iter().map(|p| p.to_string()));
        rec.extend([opt(r.avg_ci_length), opt(r.miss_low), opt(r.miss_high)]);
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing_summary(rows: &[TimingSummary], records: &[TimingRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["n", "J", "threads", "replicates", "median_seconds", "q1_seconds", "q3_seconds", "mean_estimate"])
        .map_err(csv_error)?;
    for s in rows {
        let est: Vec<f64> = records
            .iter()
            .filter(|r| r.n == s.n && r.j == s.j)
            .map(|r| r.estimate)
            .collect();
        let mean = est.iter().sum::<f64>() / est.len().max(1) as f64;
        w.write_record([
            s.n.to_string(),
            s.j.to_string(),
            s.threads.to_string(),
            s.replicates.to_string(),
            s.median.to_string(),
            s.q1.to_string(),
            s.q3.to_string(),
            mean.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a dataset with its column names as the header.
pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(data.column_names()).map_err(csv_error)?;
    for i in 0..data.n() {
        w.write_record(data.row(i).iter().map(|v| v.to_string()))
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a numeric CSV with a header row. Line numbers in errors count the
/// header as line 1 and columns are 1-based.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_dataset(&text)
}

pub(crate) fn parse_dataset(text: &str) -> Result<Dataset> {
    if text.trim().is_empty() {
        return Err(CelError::Parse {
            line: 1,
            column: 1,
            message: "no header".into(),
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let names: Vec<String> = reader
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(String::from)
        .collect();
    if names.iter().any(|n| n.is_empty()) {
        return Err(CelError::Parse {
            line: 1,
            column: names.iter().position(|n| n.is_empty()).unwrap() + 1,
            message: "empty column name".into(),
        });
    }
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| CelError::Parse {
                line,
                column: c + 1,
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(CelError::Parse {
                    line,
                    column: c + 1,
                    message: format!("non-finite value '{cell}'"),
                });
            }
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(CelError::Parse {
            line: 2,
            column: 1,
            message: "no data rows".into(),
        });
    }
    Dataset::from_row_major(names, values)
}
