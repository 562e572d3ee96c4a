//! Comparison report: the metrics table, weekly traces and bar-chart data.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{per_step, MetricSet};
use crate::models::ModelKind;
use crate::preprocess::{format_datetime, ScalerParams};

const HOUR: i64 = 3600;
const WEEK_WINDOWS: usize = 7;

/// Report rows in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReportModel {
    #[serde(rename = "ARIMA")]
    Arima,
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "BiLSTM")]
    BiLstm,
    Transformer,
}

impl ReportModel {
    pub fn slug(self) -> &'static str {
        match self {
            ReportModel::Arima => "arima",
            ReportModel::Lstm => "lstm",
            ReportModel::BiLstm => "bilstm",
            ReportModel::Transformer => "transformer",
        }
    }
}

impl From<ModelKind> for ReportModel {
    fn from(k: ModelKind) -> Self {
        match k {
            ModelKind::Lstm => ReportModel::Lstm,
            ModelKind::BiLstm => ReportModel::BiLstm,
            ModelKind::Transformer => ReportModel::Transformer,
        }
    }
}

impl fmt::Display for ReportModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReportModel::Arima => f.write_str("ARIMA"),
            ReportModel::Lstm => ModelKind::Lstm.fmt(f),
            ReportModel::BiLstm => ModelKind::BiLstm.fmt(f),
            ReportModel::Transformer => ModelKind::Transformer.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub source: String,
    pub points: usize,
    pub start: String,
    pub end: String,
    pub gaps_filled: usize,
    pub duplicates_merged: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub train_windows: usize,
    pub test_windows: usize,
    pub scaler: ScalerParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub model: ReportModel,
    /// `None` when the model failed; see `notes`.
    pub metrics: Option<MetricSet>,
    pub notes: Vec<String>,
    /// Row-major `test windows × horizon`, MW. Empty on failure.
    pub predictions_mw: Vec<f64>,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub dataset: DatasetInfo,
    pub config: serde_json::Value,
    /// Epoch seconds of each test window's first target hour.
    pub target_starts: Vec<i64>,
    /// Row-major `test windows × horizon`, MW.
    pub actual_mw: Vec<f64>,
    pub models: Vec<ModelResult>,
}

/// Orders results as ARIMA, LSTM, BiLSTM, Transformer and checks that every
/// model covers the same test windows.
pub fn build_report(
    dataset: DatasetInfo,
    config: serde_json::Value,
    target_starts: Vec<i64>,
    actual_mw: Vec<f64>,
    mut models: Vec<ModelResult>,
) -> Result<ForecastReport> {
    if models.is_empty() {
        return Err(Error::usage("a report needs at least one model"));
    }
    if actual_mw.len() != target_starts.len() * dataset.horizon {
        return Err(Error::usage(format!(
            "{} actual values for {} windows × {} steps",
            actual_mw.len(),
            target_starts.len(),
            dataset.horizon
        )));
    }
    for m in &models {
        if !m.predictions_mw.is_empty() && m.predictions_mw.len() != actual_mw.len() {
            return Err(Error::usage(format!(
                "{} has {} predictions, expected {}",
                m.model,
                m.predictions_mw.len(),
                actual_mw.len()
            )));
        }
    }
    models.sort_by_key(|m| m.model);
    Ok(ForecastReport {
        dataset,
        config,
        target_starts,
        actual_mw,
        models,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `model,mae_mw,rmse_mw,mape_pct,runtime_s`; a failed model has empty metric cells.
pub fn emit_table(report: &ForecastReport) -> String {
    let mut out = String::from("model,mae_mw,rmse_mw,mape_pct,runtime_s\n");
    for m in &report.models {
        let runtime = (m.runtime_s * 1000.0).round() / 1000.0;
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.model,
            opt(m.metrics.map(|s| s.mae)),
            opt(m.metrics.map(|s| s.rmse)),
            opt(m.metrics.map(|s| s.mape)),
            runtime
        ));
    }
    out
}

/// Long-form `model,metric,value` rows for bar charts.
pub fn emit_bars(report: &ForecastReport) -> String {
    let mut out = String::from("model,metric,value\n");
    for m in &report.models {
        if let Some(s) = m.metrics {
            for (name, v) in [("mae_mw", s.mae), ("rmse_mw", s.rmse), ("mape_pct", s.mape)] {
                out.push_str(&format!("{},{name},{v}\n", m.model));
            }
        }
    }
    out
}

/// `model,step,mae_mw,rmse_mw,mape_pct` for each horizon step.
pub fn emit_per_step(report: &ForecastReport) -> Result<String> {
    let mut out = String::from("model,step,mae_mw,rmse_mw,mape_pct\n");
    for m in report.models.iter().filter(|m| m.metrics.is_some()) {
        for (i, s) in per_step(&m.predictions_mw, &report.actual_mw, report.dataset.horizon)?
            .iter()
            .enumerate()
        {
            out.push_str(&format!("{},{},{},{},{}\n", m.model, i + 1, s.mae, s.rmse, s.mape));
        }
    }
    Ok(out)
}

/// 168 consecutive hours starting at test window `week_origin`, stitched
/// from seven non-overlapping 24-step forecasts. One CSV per model, keyed by
/// model; a failed model gets an empty prediction column.
pub fn emit_traces(report: &ForecastReport, week_origin: usize) -> Result<Vec<(ReportModel, String)>> {
    let h = report.dataset.horizon;
    let n = report.target_starts.len();
    let windows: Vec<usize> = (0..WEEK_WINDOWS).map(|j| week_origin + j * h).collect();
    if windows.last().is_none_or(|&w| w >= n) {
        return Err(Error::usage(format!(
            "week origin {week_origin} needs test windows up to {} but only {n} exist",
            week_origin + (WEEK_WINDOWS - 1) * h
        )));
    }
    let t0 = report.target_starts[week_origin];
    for (j, &w) in windows.iter().enumerate() {
        if report.target_starts[w] != t0 + (j * h) as i64 * HOUR {
            return Err(Error::usage("test windows are not hourly-consecutive; cannot stitch a week"));
        }
    }
    Ok(report
        .models
        .iter()
        .map(|m| {
            let mut out = String::from("timestamp,actual_mw,predicted_mw\n");
            for &w in &windows {
                for step in 0..h {
                    let i = w * h + step;
                    let ts = report.target_starts[w] + step as i64 * HOUR;
                    let pred = m.predictions_mw.get(i).map(f64::to_string).unwrap_or_default();
                    out.push_str(&format!("{},{},{pred}\n", format_datetime(ts), report.actual_mw[i]));
                }
            }
            (m.model, out)
        })
        .collect())
}

/// Writes `report.csv`, `report.json`, `metrics_bars.csv`,
/// `metrics_per_step.csv` and one `trace_<model>.csv` per model into `dir`.
pub fn write_all(report: &ForecastReport, dir: &Path, week_origin: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.csv"), emit_table(report))?;
    std::fs::write(dir.join("metrics_bars.csv"), emit_bars(report))?;
    std::fs::write(dir.join("metrics_per_step.csv"), emit_per_step(report)?)?;
    let mut json = BufWriter::new(File::create(dir.join("report.json"))?);
    serde_json::to_writer_pretty(&mut json, report)?;
    json.flush()?;
    for (model, csv) in emit_traces(report, week_origin)? {
        std::fs::write(dir.join(format!("trace_{}.csv", model.slug())), csv)?;
    }
    Ok(())
}

pub fn read_json(path: &Path) -> Result<ForecastReport> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}
