use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::LlmCalls;
use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;

pub const RESULTS_FILE: &str = "results.csv";
pub const AGGREGATE_FILE: &str = "aggregate.txt";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auc,
    Mse,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Auc => "auc",
            Metric::Mse => "mse",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auc" => Ok(Metric::Auc),
            "mse" => Ok(Metric::Mse),
            other => Err(Error::Format(format!("unknown metric `{other}`"))),
        }
    }
}

/// One (dataset, variant, shot, seed) cell. `value` is absent when the cell
/// failed, in which case `error` says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub dataset: String,
    pub variant: String,
    pub shot: usize,
    pub seed: u64,
    pub metric: Metric,
    pub value: Option<f64>,
    pub error: Option<String>,
}

impl MetricResult {
    pub fn validate(&self) -> Result<()> {
        match (self.value, &self.error) {
            (Some(v), None) => {
                let ok = match self.metric {
                    Metric::Auc => (0.0..=1.0).contains(&v),
                    Metric::Mse => v >= 0.0,
                };
                if ok {
                    Ok(())
                } else {
                    Err(Error::Contract(format!("{} value {v} out of range", self.metric)))
                }
            }
            (None, Some(_)) => Ok(()),
            _ => Err(Error::Contract("a result carries exactly one of value and error".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub results: Vec<MetricResult>,
    pub llm_calls: LlmCalls,
    /// Published reference cells keyed by shot, rendered verbatim.
    #[serde(default)]
    pub reference: BTreeMap<usize, String>,
}

/// Mean and population standard deviation. The std is absent below two values.
pub fn mean_std(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt());
    Some((mean, std))
}

/// `"2.00 ± 0.82"`, or the mean alone when there is no std.
pub fn fmt_mean_std(values: &[f64]) -> Option<String> {
    mean_std(values).map(|(m, s)| match s {
        Some(s) => format!("{m:.2} ± {s:.2}"),
        None => format!("{m:.2}"),
    })
}

fn fmt_scientific(values: &[f64]) -> Option<String> {
    mean_std(values).map(|(m, s)| match s {
        Some(s) => format!("{m:.2e} ± {s:.2e}"),
        None => format!("{m:.2e}"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct CellKey<'a> {
    dataset: &'a str,
    variant: &'a str,
    metric: Metric,
}

/// Renders the dataset/variant × shot table. AUC cells are scaled by 100,
/// MSE cells use scientific notation.
pub fn render_aggregate(results: &[MetricResult], reference: &BTreeMap<usize, String>) -> String {
    let mut shots: Vec<usize> = results.iter().map(|r| r.shot).collect();
    shots.extend(reference.keys());
    shots.sort_unstable();
    shots.dedup();
    let mut cells: BTreeMap<CellKey, BTreeMap<usize, (Vec<f64>, usize)>> = BTreeMap::new();
    let mut row_order: Vec<CellKey> = Vec::new();
    for r in results {
        let key = CellKey {
            dataset: &r.dataset,
            variant: &r.variant,
            metric: r.metric,
        };
        if !row_order.contains(&key) {
            row_order.push(key);
        }
        let cell = cells.entry(key).or_default().entry(r.shot).or_default();
        match r.value {
            Some(v) => cell.0.push(v),
            None => cell.1 += 1,
        }
    }
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("dataset / variant".to_string())
        .chain(std::iter::once("metric".to_string()))
        .chain(shots.iter().map(|s| format!("shot {s}")))
        .collect()];
    for key in &row_order {
        let by_shot = &cells[key];
        let mut row = vec![format!("{} / {}", key.dataset, key.variant), key.metric.to_string()];
        for shot in &shots {
            row.push(match by_shot.get(shot) {
                None => "-".into(),
                Some((values, failed)) => {
                    let scaled: Vec<f64> = match key.metric {
                        Metric::Auc => values.iter().map(|v| v * 100.0).collect(),
                        Metric::Mse => values.clone(),
                    };
                    let text = match key.metric {
                        Metric::Auc => fmt_mean_std(&scaled),
                        Metric::Mse => fmt_scientific(&scaled),
                    };
                    match (text, failed) {
                        (Some(t), 0) => t,
                        (Some(t), f) => format!("{t} ({f} failed)"),
                        (None, f) => format!("failed ({f})"),
                    }
                }
            });
        }
        rows.push(row);
    }
    if !reference.is_empty() {
        let mut row = vec!["reference".to_string(), String::new()];
        row.extend(shots.iter().map(|s| reference.get(s).cloned().unwrap_or_else(|| "-".into())));
        rows.push(row);
    }
    let columns = rows[0].len();
    let widths: Vec<usize> = (0..columns)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    out.push_str("# mean ± population std (divide by N) over seeds; AUC × 100, MSE in normalized target space\n");
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    dataset: String,
    variant: String,
    shot: usize,
    seed: u64,
    metric: String,
    value: String,
    error: String,
}

pub fn results_to_csv(results: &[MetricResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(Record {
            dataset: r.dataset.clone(),
            variant: r.variant.clone(),
            shot: r.shot,
            seed: r.seed,
            metric: r.metric.to_string(),
            value: r.value.map(|v| v.to_string()).unwrap_or_default(),
            error: r.error.clone().unwrap_or_default(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_results(text: &str) -> Result<Vec<MetricResult>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for record in reader.deserialize() {
        let r: Record = record?;
        let value = if r.value.is_empty() {
            None
        } else {
            Some(
                r.value
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad value `{}`: {e}", r.value)))?,
            )
        };
        let result = MetricResult {
            dataset: r.dataset,
            variant: r.variant,
            shot: r.shot,
            seed: r.seed,
            metric: r.metric.parse()?,
            value,
            error: (!r.error.is_empty()).then_some(r.error),
        };
        result.validate()?;
        out.push(result);
    }
    Ok(out)
}

pub fn read_results(path: &Path) -> Result<Vec<MetricResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub llm_call_summary: LlmCalls,
    pub cells: usize,
    pub failed: usize,
    #[serde(default)]
    pub reference: BTreeMap<usize, String>,
}

pub struct ReportFiles {
    pub results: PathBuf,
    pub aggregate: PathBuf,
    pub summary: PathBuf,
}

/// Writes the raw results table, the aggregate table and the JSON summary
/// into `dir`.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<ReportFiles> {
    if report.results.is_empty() {
        return Err(Error::Contract("cannot emit an empty report".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        results: dir.join(RESULTS_FILE),
        aggregate: dir.join(AGGREGATE_FILE),
        summary: dir.join(SUMMARY_FILE),
    };
    write_atomic(&files.results, results_to_csv(&report.results)?.as_bytes())?;
    write_atomic(
        &files.aggregate,
        render_aggregate(&report.results, &report.reference).as_bytes(),
    )?;
    let summary = Summary {
        llm_call_summary: report.llm_calls,
        cells: report.results.len(),
        failed: report.results.iter().filter(|r| r.value.is_none()).count(),
        reference: report.reference.clone(),
    };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    write_atomic(&files.summary, json.as_bytes())?;
    Ok(files)
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rebuilds the aggregate table of a report directory from its raw rows.
pub fn regenerate_aggregate(dir: &Path) -> Result<String> {
    let results = read_results(&dir.join(RESULTS_FILE))?;
    let summary_path = dir.join(SUMMARY_FILE);
    let reference = if summary_path.exists() {
        read_summary(&summary_path)?.reference
    } else {
        BTreeMap::new()
    };
    Ok(render_aggregate(&results, &reference))
}
