//! End-to-end experiment: data preparation, every configured model on one
//! shared split, and the report artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arima::{rolling_forecast, select_order, ArimaModel, ArimaOrder, OrderSelection, RollingConfig};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, metric_set};
use crate::models::{ForecastModel, ModelConfig, ModelKind};
use crate::preprocess::{
    chrono_split, fit_scaler, format_datetime, interpolate_linear, load_csv, make_windows, regularize_hourly,
    ScalerParams, SplitDataset, TimeSeries,
};
use crate::report::{build_report, write_all, DatasetInfo, ForecastReport, ModelResult, ReportModel};
use crate::synthetic::seasonal_load;
use crate::training::{fit_with, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub source: String,
    pub raw_rows: usize,
    pub rows: usize,
    pub gaps_filled: usize,
    pub duplicates_merged: usize,
    pub min_mw: f64,
    pub max_mw: f64,
    pub start: String,
    pub end: String,
}

/// Hourly, gap-free series plus what cleaning it took.
#[derive(Debug, Clone)]
pub struct LoadedSeries {
    pub series: TimeSeries,
    pub stats: SeriesStats,
}

/// Reads the configured CSV (or generates the synthetic series), puts it on
/// the hourly grid and fills gaps linearly.
pub fn load_series(cfg: &ExperimentConfig) -> Result<LoadedSeries> {
    let (series, source, raw_rows, gaps, dups) = match &cfg.data.path {
        Some(path) => {
            let records = load_csv(path, cfg.data.column.as_deref())?;
            let reg = regularize_hourly(&records)?;
            let filled = interpolate_linear(&reg.series)?;
            (filled, path.display().to_string(), records.len(), reg.gap_count(), reg.duplicates_merged)
        }
        None => {
            let s = seasonal_load(cfg.data.synthetic_points, cfg.seed);
            let n = s.len();
            (s, format!("synthetic seasonal load (seed {})", cfg.seed), n, 0, 0)
        }
    };
    let (min_mw, max_mw) = series
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let stats = SeriesStats {
        source,
        raw_rows,
        rows: series.len(),
        gaps_filled: gaps,
        duplicates_merged: dups,
        min_mw,
        max_mw,
        start: format_datetime(series.timestamps[0]),
        end: format_datetime(*series.timestamps.last().unwrap()),
    };
    Ok(LoadedSeries { series, stats })
}

/// Everything every model shares: the scaled windows, the split and the
/// MW-space test targets.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub loaded: LoadedSeries,
    pub scaler: ScalerParams,
    pub split: SplitDataset,
    /// Row-major `test windows × horizon`, MW.
    pub actual_mw: Vec<f64>,
    /// Epoch seconds of each test window's first target hour.
    pub target_starts: Vec<i64>,
    /// Series index of each test window's first target (the forecast origin).
    pub forecast_origins: Vec<usize>,
}

impl Experiment {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let loaded = load_series(cfg)?;
        let values = &loaded.series.values;
        let (l, h) = (cfg.input_len, cfg.horizon);
        // Window positions only; the scaler is fitted on the training span.
        let probe = make_windows(values, l, h, cfg.stride)?;
        let probe_split = chrono_split(&probe, cfg.split_fraction)?;
        let train_end = probe_split.train.origins.last().unwrap() + l + h;
        let scaler = fit_scaler(values, 0..train_end)?;
        let scaled = scaler.transform(values);
        let split = chrono_split(&make_windows(&scaled, l, h, cfg.stride)?, cfg.split_fraction)?;
        let forecast_origins: Vec<usize> = split.test.origins.iter().map(|o| o + l).collect();
        let target_starts = forecast_origins.iter().map(|&k| loaded.series.timestamps[k]).collect();
        let actual_mw = scaler.inverse_transform(&split.test.targets);
        Ok(Experiment {
            loaded,
            scaler,
            split,
            actual_mw,
            target_starts,
            forecast_origins,
        })
    }

    pub fn dataset_info(&self, cfg: &ExperimentConfig) -> DatasetInfo {
        let s = &self.loaded.stats;
        DatasetInfo {
            source: s.source.clone(),
            points: s.rows,
            start: s.start.clone(),
            end: s.end.clone(),
            gaps_filled: s.gaps_filled,
            duplicates_merged: s.duplicates_merged,
            input_len: cfg.input_len,
            horizon: cfg.horizon,
            train_windows: self.split.train.len(),
            test_windows: self.split.test.len(),
            scaler: self.scaler,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArimaSummary {
    pub order: Option<ArimaOrder>,
    pub selection: Option<OrderSelection>,
    /// Model estimated at the first test origin.
    pub first_model: Option<ArimaModel>,
    pub fits: usize,
}

pub struct ArimaRun {
    pub result: ModelResult,
    pub summary: ArimaSummary,
}

/// Order selection on the pre-test history, then rolling forecasts from every
/// test origin on the MW series. Failures end up in the notes.
pub fn run_arima(exp: &Experiment, cfg: &ExperimentConfig) -> ArimaRun {
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut summary = ArimaSummary {
        order: cfg.arima.fixed_order(),
        selection: None,
        first_model: None,
        fits: 0,
    };
    let outcome = (|| -> Result<Vec<f64>> {
        let series = &exp.loaded.series.values;
        let history = &series[..exp.forecast_origins[0]];
        let order = match cfg.arima.fixed_order() {
            Some(o) => o,
            None => {
                let sel = select_order(history, cfg.arima.max_p, cfg.arima.max_d, cfg.arima.max_q)?;
                let o = sel.order;
                summary.selection = Some(sel);
                o
            }
        };
        summary.order = Some(order);
        notes.push(format!("order {order}"));
        let rc = RollingConfig {
            horizon: cfg.horizon,
            refit_every: cfg.arima.refit_every,
            fit_window: cfg.arima.fit_window,
        };
        let roll = rolling_forecast(series, order, &exp.forecast_origins, &rc)?;
        summary.fits = roll.fits;
        if !roll.failures.is_empty() {
            notes.push(format!("{} origins fell back after fit failures", roll.failures.len()));
        }
        if roll.not_converged > 0 {
            notes.push(format!("{} fits stopped at the iteration cap", roll.not_converged));
        }
        if let Some(m) = &roll.first_model {
            notes.extend(m.warnings.iter().cloned());
        }
        summary.first_model = roll.first_model;
        Ok(roll.forecasts.concat())
    })();
    let (metrics, predictions_mw) = match outcome.and_then(|p| Ok((metric_set(&p, &exp.actual_mw)?, p))) {
        Ok((m, p)) => (Some(m), p),
        Err(e) => {
            notes.push(format!("failed: {e}"));
            (None, vec![])
        }
    };
    ArimaRun {
        result: ModelResult {
            model: ReportModel::Arima,
            metrics,
            notes,
            predictions_mw,
            runtime_s: start.elapsed().as_secs_f64(),
        },
        summary,
    }
}

pub struct NeuralRun {
    pub result: ModelResult,
    pub model: Option<ForecastModel>,
    pub log: TrainLog,
}

/// Distinct, reproducible seeds per model and purpose.
pub fn derive_seed(seed: u64, kind: ModelKind, purpose: u64) -> u64 {
    let k = ModelKind::ALL.iter().position(|&m| m == kind).unwrap() as u64;
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((k + 1) << 8) ^ purpose
}

pub fn model_config(cfg: &ExperimentConfig, kind: ModelKind) -> ModelConfig {
    match kind {
        ModelKind::Lstm | ModelKind::BiLstm => ModelConfig::Lstm(cfg.lstm_config()),
        ModelKind::Transformer => ModelConfig::Transformer(cfg.transformer_config()),
    }
}

/// Initialises, trains for the configured epochs and evaluates on the test
/// windows in MW.
pub fn run_neural(exp: &Experiment, cfg: &ExperimentConfig, kind: ModelKind) -> NeuralRun {
    let start = Instant::now();
    let mut log = TrainLog::default();
    let outcome = (|| -> Result<(ForecastModel, ModelResult)> {
        let model = ForecastModel::new(kind, model_config(cfg, kind), derive_seed(cfg.seed, kind, 0))?;
        let train = crate::training::TrainConfig {
            seed: derive_seed(cfg.seed, kind, 1),
            ..cfg.train
        };
        let (model, _) = fit_with(model, &exp.split, &train, |e| log.epochs.push(e.clone()))?;
        let pred = crate::training::predict(&model, &exp.split.test, cfg.train.batch_size)?;
        let eval = evaluate_model(&pred, &exp.split.test, &exp.scaler)?;
        let notes = vec![format!("{} parameters, {} epochs", model.num_params(), log.len())];
        Ok((
            model,
            ModelResult {
                model: kind.into(),
                metrics: Some(eval.metrics),
                notes,
                predictions_mw: eval.predictions_mw,
                runtime_s: 0.0,
            },
        ))
    })();
    let (model, mut result) = match outcome {
        Ok((m, r)) => (Some(m), r),
        Err(e) => (
            None,
            ModelResult {
                model: kind.into(),
                metrics: None,
                notes: vec![format!("failed after {} epochs: {e}", log.len())],
                predictions_mw: vec![],
                runtime_s: 0.0,
            },
        ),
    };
    result.runtime_s = start.elapsed().as_secs_f64();
    NeuralRun { result, model, log }
}

pub fn checkpoint_path(dir: &Path, kind: ModelKind) -> PathBuf {
    dir.join(format!("model_{}.ckpt", kind.slug()))
}

pub fn train_log_path(dir: &Path, kind: ModelKind) -> PathBuf {
    dir.join(format!("train_log_{}.csv", kind.slug()))
}

pub fn arima_summary_path(dir: &Path) -> PathBuf {
    dir.join("arima_model.json")
}

/// Checkpoint (when training finished) and the per-epoch log.
pub fn write_neural_artifacts(dir: &Path, kind: ModelKind, run: &NeuralRun, timing: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if let Some(m) = &run.model {
        m.save(&checkpoint_path(dir, kind))?;
    }
    run.log.write_csv(BufWriter::new(File::create(train_log_path(dir, kind))?), timing)
}

pub fn write_arima_artifacts(dir: &Path, run: &ArimaRun) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(arima_summary_path(dir))?);
    serde_json::to_writer_pretty(&mut w, &run.summary)?;
    w.flush()?;
    Ok(())
}

/// `target_start,h1,…,hH` with one row per test window.
pub fn write_forecasts_csv(path: &Path, target_starts: &[i64], predictions: &[f64], horizon: usize) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["target_start".to_string()];
    header.extend((1..=horizon).map(|h| format!("h{h}")));
    wtr.write_record(&header)?;
    for (ts, row) in target_starts.iter().zip(predictions.chunks(horizon)) {
        let mut rec = vec![format_datetime(*ts)];
        rec.extend(row.iter().map(f64::to_string));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

enum Job {
    Arima,
    Neural(ModelKind),
}

/// Runs every configured model on one split, writes all artifacts into
/// `cfg.out_dir` and returns the report. A failing model is reported, not
/// fatal.
pub fn benchmark(cfg: &ExperimentConfig, timing: bool) -> Result<ForecastReport> {
    let exp = Experiment::prepare(cfg)?;
    let jobs: Vec<Job> = cfg
        .model_list()?
        .into_iter()
        .map(|m| match m {
            ReportModel::Arima => Job::Arima,
            ReportModel::Lstm => Job::Neural(ModelKind::Lstm),
            ReportModel::BiLstm => Job::Neural(ModelKind::BiLstm),
            ReportModel::Transformer => Job::Neural(ModelKind::Transformer),
        })
        .collect();
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir)?;
    let results: Vec<Result<ModelResult>> = jobs
        .par_iter()
        .map(|job| match job {
            Job::Arima => {
                let run = run_arima(&exp, cfg);
                write_arima_artifacts(dir, &run)?;
                Ok(run.result)
            }
            Job::Neural(kind) => {
                let run = run_neural(&exp, cfg, *kind);
                write_neural_artifacts(dir, *kind, &run, timing)?;
                Ok(run.result)
            }
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let report = build_report(
        exp.dataset_info(cfg),
        serde_json::to_value(cfg)?,
        exp.target_starts.clone(),
        exp.actual_mw.clone(),
        results,
    )?;
    write_all(&report, dir, cfg.week_origin)?;
    Ok(report)
}

/// Re-evaluates a saved model on the test windows of `cfg`.
pub fn forecast_saved(cfg: &ExperimentConfig, kind: ReportModel) -> Result<ModelResult> {
    let exp = Experiment::prepare(cfg)?;
    let dir = &cfg.out_dir;
    let start = Instant::now();
    let result = match kind {
        ReportModel::Arima => {
            let summary: ArimaSummary = serde_json::from_reader(std::io::BufReader::new(
                File::open(arima_summary_path(dir))
                    .map_err(|e| Error::usage(format!("no fitted ARIMA in {}: {e}", dir.display())))?,
            ))?;
            let order = summary
                .order
                .ok_or_else(|| Error::usage("saved ARIMA run has no order"))?;
            let fixed = ExperimentConfig {
                arima: crate::config::ArimaConfig {
                    order: crate::config::OrderChoice::Fixed(order),
                    ..cfg.arima.clone()
                },
                ..cfg.clone()
            };
            let run = run_arima(&exp, &fixed);
            if run.result.metrics.is_none() {
                return Err(Error::Fit(run.result.notes.join("; ")));
            }
            run.result
        }
        neural => {
            let mk = match neural {
                ReportModel::Lstm => ModelKind::Lstm,
                ReportModel::BiLstm => ModelKind::BiLstm,
                _ => ModelKind::Transformer,
            };
            let model = ForecastModel::load(&checkpoint_path(dir, mk))?;
            if model.kind != mk {
                return Err(Error::Checkpoint(format!("checkpoint holds {}, not {mk}", model.kind)));
            }
            let pred = crate::training::predict(&model, &exp.split.test, cfg.train.batch_size)?;
            let eval = evaluate_model(&pred, &exp.split.test, &exp.scaler)?;
            ModelResult {
                model: neural,
                metrics: Some(eval.metrics),
                notes: vec![],
                predictions_mw: eval.predictions_mw,
                runtime_s: 0.0,
            }
        }
    };
    let result = ModelResult {
        runtime_s: start.elapsed().as_secs_f64(),
        ..result
    };
    write_forecasts_csv(
        &dir.join(format!("forecasts_{}.csv", kind.slug())),
        &exp.target_starts,
        &result.predictions_mw,
        cfg.horizon,
    )?;
    Ok(result)
}
