//! Order identification: ADF for d, then an AIC grid over (p, q).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adf_test, difference, fit_css, AdfResult, ArimaModel, ArimaOrder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    pub order: ArimaOrder,
    /// `None` when the fit failed outright.
    pub aic: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderSelection {
    pub order: ArimaOrder,
    pub aic: f64,
    /// ADF result at each differencing count tried, in order.
    pub adf: Vec<(usize, AdfResult)>,
    pub candidates: Vec<Candidate>,
}

/// Smallest `d ≤ max_d` whose differenced series rejects a unit root, then
/// the `(p, q)` with least AIC. Ties go to smaller `p+q`, then smaller `p`.
pub fn select_order(series: &[f64], max_p: usize, max_d: usize, max_q: usize) -> Result<OrderSelection> {
    let mut adf = Vec::new();
    let mut d = max_d;
    for k in 0..=max_d {
        let r = adf_test(&difference(series, k)?, None)?;
        adf.push((k, r));
        if r.reject_unit_root {
            d = k;
            break;
        }
    }

    let mut grid: Vec<ArimaOrder> = (0..=max_p)
        .flat_map(|p| (0..=max_q).map(move |q| ArimaOrder::new(p, d, q)))
        .filter(|o| o.validate().is_ok())
        .collect();
    grid.sort_by_key(|o| (o.p + o.q, o.p));

    let fits: Vec<Result<ArimaModel>> = grid.par_iter().map(|&o| fit_css(series, o)).collect();

    let mut best: Option<(ArimaOrder, f64)> = None;
    let mut candidates = Vec::with_capacity(grid.len());
    for (order, fit) in grid.into_iter().zip(fits) {
        let (model, note) = match fit {
            Ok(m) => (Some(m), None),
            Err(Error::NotConverged { best, iterations }) => {
                (Some(*best), Some(format!("not converged after {iterations} iterations")))
            }
            Err(e) => (None, Some(e.to_string())),
        };
        let aic = model.map(|m| m.aic()).filter(|a| a.is_finite());
        if let Some(a) = aic {
            if best.is_none_or(|(_, b)| a < b) {
                best = Some((order, a));
            }
        }
        candidates.push(Candidate { order, aic, note });
    }
    let (order, aic) = best.ok_or_else(|| Error::Fit("every candidate ARIMA fit failed".into()))?;
    Ok(OrderSelection {
        order,
        aic,
        adf,
        candidates,
    })
}
