//! Point-forecast error metrics in MW space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{ScalerParams, WindowedDataset};

/// Actual values at or below this magnitude are left out of MAPE.
pub const MAPE_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    /// Entries left out of MAPE by the near-zero guard.
    pub mape_excluded: usize,
}

fn check_lengths(pred: &[f64], actual: &[f64]) -> Result<()> {
    if pred.len() != actual.len() || pred.is_empty() {
        return Err(Error::usage(format!(
            "metric inputs need equal non-zero lengths, got {} and {}",
            pred.len(),
            actual.len()
        )));
    }
    Ok(())
}

pub fn mae(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_lengths(pred, actual)?;
    Ok(pred.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_lengths(pred, actual)?;
    let ms = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum::<f64>() / pred.len() as f64;
    Ok(ms.sqrt())
}

/// `100·mean|e/actual|` over entries with `|actual| > 1e-8`, and how many
/// entries were excluded.
pub fn mape(pred: &[f64], actual: &[f64]) -> Result<(f64, usize)> {
    check_lengths(pred, actual)?;
    let (mut sum, mut used) = (0.0, 0usize);
    for (p, a) in pred.iter().zip(actual) {
        if a.abs() > MAPE_GUARD {
            sum += ((p - a) / a).abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("MAPE: every actual value is zero".into()));
    }
    Ok((100.0 * sum / used as f64, pred.len() - used))
}

pub fn metric_set(pred: &[f64], actual: &[f64]) -> Result<MetricSet> {
    let (mape, mape_excluded) = mape(pred, actual)?;
    Ok(MetricSet {
        mae: mae(pred, actual)?,
        rmse: rmse(pred, actual)?,
        mape,
        mape_excluded,
    })
}

/// One [`MetricSet`] per horizon step; `pred` and `actual` are row-major
/// `windows × horizon`.
pub fn per_step(pred: &[f64], actual: &[f64], horizon: usize) -> Result<Vec<MetricSet>> {
    check_lengths(pred, actual)?;
    if horizon == 0 || !pred.len().is_multiple_of(horizon) {
        return Err(Error::usage(format!("{} values do not split into rows of {horizon}", pred.len())));
    }
    (0..horizon)
        .map(|s| {
            let p: Vec<f64> = pred.iter().skip(s).step_by(horizon).copied().collect();
            let a: Vec<f64> = actual.iter().skip(s).step_by(horizon).copied().collect();
            metric_set(&p, &a)
        })
        .collect()
}

/// Metrics plus the MW-space forecasts they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: MetricSet,
    /// Row-major `windows × horizon`, MW.
    pub predictions_mw: Vec<f64>,
    pub actual_mw: Vec<f64>,
}

/// Maps scaled predictions and the test targets back to MW, then pools all
/// windows and horizon steps.
pub fn evaluate_model(pred_scaled: &[f64], test: &WindowedDataset, scaler: &ScalerParams) -> Result<Evaluation> {
    if pred_scaled.len() != test.targets.len() {
        return Err(Error::usage(format!(
            "{} predictions for {} test windows × {} steps",
            pred_scaled.len(),
            test.len(),
            test.horizon
        )));
    }
    let predictions_mw = scaler.inverse_transform(pred_scaled);
    let actual_mw = scaler.inverse_transform(&test.targets);
    Ok(Evaluation {
        metrics: metric_set(&predictions_mw, &actual_mw)?,
        predictions_mw,
        actual_mw,
    })
}
