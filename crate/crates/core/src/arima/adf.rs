use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::ols::{least_squares, nested_rss};
use crate::error::{Error, Result};

/// Outcome of an augmented Dickey-Fuller test with a constant and no trend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdfResult {
    /// t-ratio of the lagged level coefficient.
    pub statistic: f64,
    pub lag_order: usize,
    pub nobs: usize,
    pub critical_value_5pct: f64,
    pub reject_unit_root: bool,
}

/// Default lag cap `⌊12·(n/100)^¼⌋`.
pub fn schwert_max_lag(n: usize) -> usize {
    (12.0 * (n as f64 / 100.0).powf(0.25)).floor() as usize
}

/// MacKinnon (2010) response surface for the 5% critical value, constant-only
/// case, evaluated at `nobs` regression observations.
pub fn critical_value_5pct(nobs: usize) -> f64 {
    let t = nobs as f64;
    -2.86154 - 2.8903 / t - 4.234 / (t * t) - 40.040 / (t * t * t)
}

/// Regresses `Δxₜ` on `[1, xₜ₋₁, Δxₜ₋₁ … Δxₜ₋ₖ]`, choosing `k ≤ max_lag` by
/// AIC on a common sample, then refits at the chosen lag on all usable rows.
pub fn adf_test(series: &[f64], max_lag: Option<usize>) -> Result<AdfResult> {
    let n = series.len();
    if n < 25 {
        return Err(Error::TooShort {
            required: 25,
            actual: n,
        });
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::usage("ADF input contains non-finite values"));
    }
    let dx: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    // keep at least a handful of residual degrees of freedom
    let feasible = (dx.len().saturating_sub(8)) / 2;
    let max_lag = max_lag.unwrap_or_else(|| schwert_max_lag(n)).min(feasible);

    let design = |lags: usize, start: usize| {
        let rows = dx.len() - start;
        let x = DMatrix::from_fn(rows, 2 + lags, |r, c| {
            let j = start + r;
            match c {
                0 => 1.0,
                1 => series[j],
                _ => dx[j - (c - 1)],
            }
        });
        (x, dx[start..].to_vec())
    };

    let lag_order = if max_lag == 0 {
        0
    } else {
        let (x, y) = design(max_lag, max_lag);
        let nobs = y.len() as f64;
        let rss = nested_rss(x, &y)?;
        // rss[j] belongs to the model with j+1 columns; lag k uses k+2 columns
        (0..=max_lag)
            .map(|k| {
                let aic = nobs * (rss[k + 1] / nobs).ln() + 2.0 * (k + 2) as f64;
                (k, aic)
            })
            .fold((0, f64::INFINITY), |best, (k, aic)| if aic < best.1 { (k, aic) } else { best })
            .0
    };

    let (x, y) = design(lag_order, lag_order);
    let fit = least_squares(x, &y)?;
    let statistic = fit.beta[1] / fit.std_error(1);
    let cv = critical_value_5pct(fit.nobs);
    Ok(AdfResult {
        statistic,
        lag_order,
        nobs: fit.nobs,
        critical_value_5pct: cv,
        reject_unit_root: statistic < cv,
    })
}
