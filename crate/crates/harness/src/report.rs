//! Consolidates finished runs into one table.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunMethod;
use crate::error::{io_at, HarnessError, Result};
use crate::train::{MetricsRecord, RunInfo, METRICS_FILE, RUN_FILE};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub run: String,
    pub method: RunMethod,
    pub private: bool,
    pub trainable_fraction: f64,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub accuracy: f64,
}

/// Parses a metrics file, reporting the first bad line by number.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| HarnessError::Io(format!("{}:{}: malformed metrics record: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn read_run(path: &Path) -> Result<RunInfo> {
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Directories under `dir` (including `dir`) holding a metrics file.
fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if dir.join(METRICS_FILE).is_file() {
        out.push(dir.to_path_buf());
    }
    let mut children: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_at(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for c in children {
        out.extend(run_dirs(&c)?);
    }
    Ok(out)
}

/// One row per run under `dir`, sorted by method and then run name.
pub fn collect(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for run in run_dirs(dir)? {
        let records = read_metrics(&run.join(METRICS_FILE))?;
        let info = read_run(&run.join(RUN_FILE))?;
        let last = records.last();
        let name = run.strip_prefix(dir).unwrap_or(&run).display().to_string();
        rows.push(ReportRow {
            run: if name.is_empty() { ".".into() } else { name },
            method: info.method,
            private: info.private,
            trainable_fraction: info.trainable_fraction,
            epsilon: last.and_then(|r| r.epsilon_spent).or(info.epsilon),
            delta: info.delta,
            accuracy: last.map_or(info.test_accuracy, |r| r.eval_accuracy),
        });
    }
    rows.sort_by(|a, b| a.method.name().cmp(b.method.name()).then_with(|| a.run.cmp(&b.run)));
    Ok(rows)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v}"))
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("run,method,private,trainable_fraction,epsilon,delta,accuracy\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.run,
            r.method.name(),
            r.private,
            r.trainable_fraction,
            opt(r.epsilon),
            opt(r.delta),
            r.accuracy
        ));
    }
    s
}

pub fn summary(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:<24} {:<10} {:>8} {:>10} {:>8} {:>9}\n",
        "run", "method", "private", "fraction", "epsilon", "accuracy"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<24} {:<10} {:>8} {:>10.6} {:>8} {:>9.4}\n",
            r.run,
            r.method.name(),
            r.private,
            r.trainable_fraction,
            r.epsilon.map_or_else(|| "-".into(), |e| format!("{e:.3}")),
            r.accuracy
        ));
    }
    s.push_str(&format!("{} run(s)\n", rows.len()));
    s
}

/// Writes `report.json` and `report.csv` into `dir` and returns the rows.
pub fn report(dir: &Path) -> Result<Vec<ReportRow>> {
    let rows = collect(dir)?;
    let json = serde_json::to_string_pretty(&rows).map_err(|e| HarnessError::Io(e.to_string()))?;
    let jp = dir.join(REPORT_JSON);
    std::fs::write(&jp, json + "\n").map_err(io_at(&jp))?;
    let cp = dir.join(REPORT_CSV);
    std::fs::write(&cp, to_csv(&rows)).map_err(io_at(&cp))?;
    Ok(rows)
}
