//! Rolling-origin forecasting with periodic re-estimation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_css, fit_css_from, ArimaModel, ArimaOrder, FitOptions};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RollingConfig {
    pub horizon: usize,
    /// Re-estimate every this many origins; 0 fits once and only re-filters.
    pub refit_every: usize,
    /// Most recent observations used per fit; `None` uses all history.
    pub fit_window: Option<usize>,
}

impl Default for RollingConfig {
    fn default() -> Self {
        RollingConfig {
            horizon: 24,
            refit_every: 24,
            fit_window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginFailure {
    pub origin: usize,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RollingForecast {
    pub origins: Vec<usize>,
    /// One row of `horizon` level forecasts per origin.
    pub forecasts: Vec<Vec<f64>>,
    pub failures: Vec<OriginFailure>,
    /// Number of estimations performed.
    pub fits: usize,
    /// Estimations that stopped at the iteration cap (best iterate used).
    pub not_converged: usize,
    /// Model estimated at the first origin.
    pub first_model: Option<ArimaModel>,
}

/// Forecasts `horizon` steps from each origin. Origin `k` sees `series[..k]`
/// only; the first target is `series[k]`.
pub fn rolling_forecast(
    series: &[f64],
    order: ArimaOrder,
    origins: &[usize],
    cfg: &RollingConfig,
) -> Result<RollingForecast> {
    if origins.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::usage("rolling origins must be strictly increasing"));
    }
    if let Some(&k) = origins.last() {
        if k > series.len() {
            return Err(Error::usage(format!("origin {k} is past the end of the series")));
        }
    }
    let min_history = order.d + 10 * order.num_params();
    if let Some(&k) = origins.first() {
        if k < min_history {
            return Err(Error::TooShort {
                required: min_history,
                actual: k,
            });
        }
    }
    let block = if cfg.refit_every == 0 {
        origins.len().max(1)
    } else {
        cfg.refit_every
    };
    let blocks: Vec<&[usize]> = origins.chunks(block).collect();
    let window_start = |k: usize| cfg.fit_window.map_or(0, |w| k.saturating_sub(w));

    let Some((first, rest)) = blocks.split_first() else {
        return Ok(RollingForecast {
            origins: vec![],
            forecasts: vec![],
            failures: vec![],
            fits: 0,
            not_converged: 0,
            first_model: None,
        });
    };

    let fit_at = |k: usize, start: Option<&ArimaModel>| -> BlockFit {
        let history = &series[window_start(k)..k];
        let res = match start {
            Some(m) => fit_css_from(history, order, Some(m), FitOptions::default()),
            None => fit_css(history, order),
        };
        match res {
            Ok(m) => BlockFit::Ok(m, false),
            Err(Error::NotConverged { best, .. }) => BlockFit::Ok(*best, true),
            Err(e) => BlockFit::Failed(e.to_string()),
        }
    };

    let first_fit = fit_at(first[0], None);
    let first_model = match &first_fit {
        BlockFit::Ok(m, _) => Some(m.clone()),
        BlockFit::Failed(_) => None,
    };
    let mut fitted = vec![first_fit];
    fitted.extend(
        rest.par_iter()
            .map(|b| fit_at(b[0], first_model.as_ref()))
            .collect::<Vec<_>>(),
    );

    let mut out = RollingForecast {
        origins: origins.to_vec(),
        forecasts: Vec::with_capacity(origins.len()),
        failures: Vec::new(),
        fits: fitted.len(),
        not_converged: 0,
        first_model: first_model.clone(),
    };
    let per_block: Vec<(Vec<Vec<f64>>, Vec<OriginFailure>)> = blocks
        .par_iter()
        .zip(fitted.par_iter())
        .map(|(b, fit)| forecast_block(series, b, fit, first_model.as_ref(), cfg.horizon))
        .collect();
    for fit in &fitted {
        if matches!(fit, BlockFit::Ok(_, true)) {
            out.not_converged += 1;
        }
    }
    for (f, fail) in per_block {
        out.forecasts.extend(f);
        out.failures.extend(fail);
    }
    Ok(out)
}

enum BlockFit {
    /// Model and whether the iteration cap was hit.
    Ok(ArimaModel, bool),
    Failed(String),
}

fn forecast_block(
    series: &[f64],
    block: &[usize],
    fit: &BlockFit,
    fallback: Option<&ArimaModel>,
    horizon: usize,
) -> (Vec<Vec<f64>>, Vec<OriginFailure>) {
    let mut failures = Vec::new();
    let model = match fit {
        BlockFit::Ok(m, _) => Some(m),
        BlockFit::Failed(msg) => {
            failures.extend(block.iter().map(|&origin| OriginFailure {
                origin,
                message: msg.clone(),
            }));
            fallback
        }
    };
    let last = *block.last().unwrap();
    let tails = model.map(|m| m.tail_at(&series[..last], block));
    match (model, tails) {
        (Some(m), Some(Ok(tails))) => {
            let rows = tails
                .into_iter()
                .map(|tail| {
                    let mut m = m.clone();
                    m.tail = tail;
                    m.forecast(horizon)
                })
                .collect();
            (rows, failures)
        }
        (_, tails) => {
            if let Some(Err(e)) = tails {
                failures = block
                    .iter()
                    .map(|&origin| OriginFailure {
                        origin,
                        message: e.to_string(),
                    })
                    .collect();
            }
            // persistence: repeat the last observed level
            let rows = block.iter().map(|&k| vec![series[k - 1]; horizon]).collect();
            (rows, failures)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::simulate_arma;

    fn cfg(refit_every: usize) -> RollingConfig {
        RollingConfig {
            horizon: 24,
            refit_every,
            fit_window: None,
        }
    }

    #[test]
    fn refit_cadence() {
        let x = simulate_arma(&[0.6], &[], 5.0, 1.0, 600, 1);
        let order = ArimaOrder::new(1, 0, 0);
        let origins = [400, 450, 500];
        let every = rolling_forecast(&x, order, &origins, &cfg(1)).unwrap();
        assert_eq!(every.fits, 3);
        let once = rolling_forecast(&x, order, &origins, &cfg(0)).unwrap();
        assert_eq!(once.fits, 1);
        assert_eq!(once.forecasts.len(), 3);
        assert!(once.failures.is_empty());
        // first origin shares its fit either way
        assert_eq!(every.forecasts[0], once.forecasts[0]);
    }

    #[test]
    fn single_fit_refilters_each_origin() {
        let x = simulate_arma(&[0.6], &[0.3], 0.0, 1.0, 800, 2);
        let order = ArimaOrder::new(1, 0, 1);
        let origins = [500, 600, 700];
        let r = rolling_forecast(&x, order, &origins, &cfg(0)).unwrap();
        let m = r.first_model.unwrap();
        for (i, &k) in origins.iter().enumerate() {
            let expect = m.refilter(&x[..k]).unwrap().forecast(24);
            assert_eq!(r.forecasts[i], expect);
        }
    }

    #[test]
    fn forecasts_ignore_future_data() {
        let x = simulate_arma(&[0.5], &[0.2], 2.0, 1.0, 900, 6);
        let order = ArimaOrder::new(1, 1, 1);
        let origins: Vec<usize> = (500..800).step_by(37).collect();
        let base = rolling_forecast(&x, order, &origins, &cfg(3)).unwrap();
        for (i, &k) in origins.iter().enumerate() {
            let mut y = x.clone();
            y[k..].iter_mut().for_each(|v| *v = f64::NAN);
            let cut = rolling_forecast(&y, order, &origins[..=i], &cfg(3)).unwrap();
            assert_eq!(cut.forecasts[i], base.forecasts[i], "origin {k}");
        }
    }

    #[test]
    fn rejects_unsorted_origins() {
        let x = simulate_arma(&[0.5], &[], 0.0, 1.0, 300, 1);
        assert!(rolling_forecast(&x, ArimaOrder::new(1, 0, 0), &[200, 100], &cfg(1)).is_err());
    }
}
