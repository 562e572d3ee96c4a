//! Box-Jenkins ARIMA baseline.
//!
//! The model on the `d`-times differenced series `w` is
//!
//! ```text
//! wₜ = c + Σᵢ φᵢ wₜ₋ᵢ + εₜ + Σⱼ θⱼ εₜ₋ⱼ
//! ```
//!
//! estimated by conditional sum of squares with zero pre-sample innovations.

mod acf;
mod adf;
mod css;
mod ols;
mod rolling;
mod select;

pub use acf::{acf, pacf, pacf_from_acf};
pub use adf::{adf_test, critical_value_5pct, schwert_max_lag, AdfResult};
pub use css::{fit_css, fit_css_from, FitOptions};
pub use rolling::{rolling_forecast, OriginFailure, RollingConfig, RollingForecast};
pub use select::{select_order, OrderSelection};

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub fn new(p: usize, d: usize, q: usize) -> Self {
        ArimaOrder { p, d, q }
    }

    /// Number of estimated mean-equation parameters (intercept included).
    pub fn num_params(&self) -> usize {
        self.p + self.q + 1
    }

    /// A model with no AR or MA terms is only allowed on a differenced series.
    pub fn validate(&self) -> Result<()> {
        if self.p + self.q == 0 && self.d == 0 {
            return Err(Error::usage("ARIMA(0,0,0) is white noise; need p+q ≥ 1 or d ≥ 1"));
        }
        Ok(())
    }
}

impl std::fmt::Display for ArimaOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.p, self.d, self.q)
    }
}

/// History needed to forecast from the end of the fitted sample.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ForecastTail {
    /// Last `d` levels of the undifferenced series.
    pub levels: Vec<f64>,
    /// Last `p` values of the differenced series.
    pub diffs: Vec<f64>,
    /// Last `q` innovations.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaModel {
    pub order: ArimaOrder,
    pub ar_coeffs: Vec<f64>,
    pub ma_coeffs: Vec<f64>,
    pub intercept: f64,
    pub sigma2: f64,
    pub n_effective: usize,
    pub tail: ForecastTail,
    /// Non-stationary AR or non-invertible MA polynomial, and similar notes.
    pub warnings: Vec<String>,
    /// Normalised CSS objective after each accepted optimiser iteration.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_trace: Vec<f64>,
}

impl ArimaModel {
    /// `n·ln(σ²) + 2(p+q+1)`.
    pub fn aic(&self) -> f64 {
        self.n_effective as f64 * self.sigma2.ln() + 2.0 * self.order.num_params() as f64
    }

    /// Point forecasts for `steps` levels past the end of the sample. Future
    /// innovations are zero; known residuals feed the MA terms while in range.
    pub fn forecast(&self, steps: usize) -> Vec<f64> {
        let (p, q) = (self.order.p, self.order.q);
        let mut w = self.tail.diffs.clone();
        let mut e = self.tail.residuals.clone();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut v = self.intercept;
            for i in 1..=p {
                v += self.ar_coeffs[i - 1] * w[w.len() - i];
            }
            for j in 1..=q {
                v += self.ma_coeffs[j - 1] * e[e.len() - j];
            }
            w.push(v);
            e.push(0.0);
            out.push(v);
        }
        if self.order.d == 0 {
            out
        } else {
            undifference(&out, &self.tail.levels).expect("tail holds d levels")
        }
    }

    /// Same coefficients, with the forecast tail recomputed by running the
    /// innovation recursion over `series` (all of it is treated as history).
    pub fn refilter(&self, series: &[f64]) -> Result<ArimaModel> {
        let mut m = self.clone();
        m.tail = self.tail_at(series, &[series.len()])?.pop().unwrap();
        Ok(m)
    }

    /// Forecast tails as if the sample ended at each cut in `cuts` (ascending,
    /// each ≤ `series.len()`). One innovation pass serves every cut; the tail
    /// for cut `k` depends on `series[..k]` only.
    pub fn tail_at(&self, series: &[f64], cuts: &[usize]) -> Result<Vec<ForecastTail>> {
        let ArimaOrder { p, d, q } = self.order;
        let last = cuts.iter().copied().max().unwrap_or(0);
        if let Some(&k) = cuts.iter().find(|&&k| k < d + p.max(1)) {
            return Err(Error::TooShort {
                required: d + p.max(1),
                actual: k,
            });
        }
        let w = difference(&series[..last], d)?;
        let e = innovations(&w, self.intercept, &self.ar_coeffs, &self.ma_coeffs);
        Ok(cuts
            .iter()
            .map(|&k| {
                let wk = k - d;
                ForecastTail {
                    levels: series[k - d..k].to_vec(),
                    diffs: w[wk - p..wk].to_vec(),
                    residuals: last_padded(&e[..wk], q),
                }
            })
            .collect())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

fn last_padded(xs: &[f64], n: usize) -> Vec<f64> {
    if xs.len() >= n {
        xs[xs.len() - n..].to_vec()
    } else {
        let mut v = vec![0.0; n - xs.len()];
        v.extend_from_slice(xs);
        v
    }
}

/// d-fold first differences.
pub fn difference(series: &[f64], d: usize) -> Result<Vec<f64>> {
    if series.len() <= d {
        return Err(Error::TooShort {
            required: d + 1,
            actual: series.len(),
        });
    }
    let mut out = series.to_vec();
    for _ in 0..d {
        out = out.windows(2).map(|w| w[1] - w[0]).collect();
    }
    Ok(out)
}

/// Integrates d-th differences back to levels. `anchors` holds the last `d`
/// observed levels; its length sets `d`.
pub fn undifference(diffs: &[f64], anchors: &[f64]) -> Result<Vec<f64>> {
    let d = anchors.len();
    // last value of Δᵏ over the anchor window, k = 0..d-1
    let mut lasts = Vec::with_capacity(d);
    let mut level = anchors.to_vec();
    for _ in 0..d {
        lasts.push(*level.last().ok_or_else(|| Error::usage("empty anchor"))?);
        level = level.windows(2).map(|w| w[1] - w[0]).collect();
    }
    let mut y = diffs.to_vec();
    for &start in lasts.iter().rev() {
        let mut acc = start;
        for v in y.iter_mut() {
            acc += *v;
            *v = acc;
        }
    }
    Ok(y)
}

/// Innovation recursion with zero pre-sample innovations; entries before
/// index `p` are zero.
pub(crate) fn innovations(w: &[f64], c: f64, ar: &[f64], ma: &[f64]) -> Vec<f64> {
    let (p, q) = (ar.len(), ma.len());
    let mut e = vec![0.0; w.len()];
    for t in p..w.len() {
        let mut v = w[t] - c;
        for i in 1..=p {
            v -= ar[i - 1] * w[t - i];
        }
        for j in 1..=q.min(t) {
            v -= ma[j - 1] * e[t - j];
        }
        e[t] = v;
    }
    e
}

/// Largest modulus among companion-matrix eigenvalues of `zᵏ − a₁zᵏ⁻¹ − … − aₖ`.
/// The lag polynomial `1 − Σ aᵢ zⁱ` has a root on or inside the unit circle
/// exactly when this is ≥ 1.
pub(crate) fn companion_spectral_radius(a: &[f64]) -> f64 {
    let k = a.len();
    if k == 0 {
        return 0.0;
    }
    let m = DMatrix::from_fn(k, k, |i, j| {
        if i == 0 {
            a[j]
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// `true` when some root of the lag polynomial has modulus ≤ `bound`.
pub(crate) fn has_root_within(a: &[f64], bound: f64) -> bool {
    companion_spectral_radius(a) >= 1.0 / bound
}

/// Writes `lag,acf,pacf` rows.
pub fn write_acf_pacf_csv<W: Write>(w: W, acf: &[f64], pacf: &[f64]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["lag", "acf", "pacf"])?;
    for (k, (a, p)) in acf.iter().zip(pacf).enumerate() {
        wtr.write_record([k.to_string(), a.to_string(), p.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes one `differencing,statistic,…` row per ADF result.
pub fn write_adf_csv<W: Write>(w: W, results: &[(usize, AdfResult)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "differencing",
        "statistic",
        "lag_order",
        "nobs",
        "critical_value_5pct",
        "reject_unit_root",
    ])?;
    for (d, r) in results {
        wtr.write_record([
            d.to_string(),
            r.statistic.to_string(),
            r.lag_order.to_string(),
            r.nobs.to_string(),
            r.critical_value_5pct.to_string(),
            r.reject_unit_root.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model(order: ArimaOrder, ar: Vec<f64>, ma: Vec<f64>, c: f64, tail: ForecastTail) -> ArimaModel {
        ArimaModel {
            order,
            ar_coeffs: ar,
            ma_coeffs: ma,
            intercept: c,
            sigma2: 1.0,
            n_effective: 100,
            tail,
            warnings: vec![],
            objective_trace: vec![],
        }
    }

    #[test]
    fn difference_examples() {
        assert_eq!(difference(&[1.0, 3.0, 6.0, 10.0], 1).unwrap(), vec![2.0, 3.0, 4.0]);
        assert_eq!(difference(&[1.0, 3.0], 0).unwrap(), vec![1.0, 3.0]);
        assert!(difference(&[1.0, 3.0], 2).is_err());
    }

    #[test]
    fn order_validation() {
        assert!(ArimaOrder::new(0, 0, 0).validate().is_err());
        assert!(ArimaOrder::new(0, 1, 0).validate().is_ok());
    }

    #[test]
    fn constant_model_forecasts_intercept() {
        let m = model(ArimaOrder::new(0, 0, 0), vec![], vec![], 7.5, ForecastTail::default());
        assert_eq!(m.forecast(24), vec![7.5; 24]);
    }

    #[test]
    fn ar1_matches_closed_form() {
        let (c, phi, last) = (2.0, 0.6, 10.0);
        let tail = ForecastTail {
            levels: vec![],
            diffs: vec![last],
            residuals: vec![],
        };
        let m = model(ArimaOrder::new(1, 0, 0), vec![phi], vec![], c, tail);
        for (h, v) in m.forecast(24).iter().enumerate() {
            let h = (h + 1) as i32;
            let closed = c * (1.0 - phi.powi(h)) / (1.0 - phi) + phi.powi(h) * last;
            assert!((v - closed).abs() < 1e-9);
        }
    }

    #[test]
    fn random_walk_forecast_is_last_level() {
        let series = [3.0, 5.0, 4.0, 8.0];
        let m = model(ArimaOrder::new(0, 1, 0), vec![], vec![], 0.0, ForecastTail::default());
        let m = m.refilter(&series).unwrap();
        assert_eq!(m.forecast(24), vec![8.0; 24]);
    }

    #[test]
    fn ma_forecast_uses_known_residual_once() {
        let tail = ForecastTail {
            levels: vec![],
            diffs: vec![],
            residuals: vec![2.0],
        };
        let m = model(ArimaOrder::new(0, 0, 1), vec![], vec![0.5], 1.0, tail);
        assert_eq!(m.forecast(3), vec![2.0, 1.0, 1.0]);
    }

    #[test]
    fn root_checks() {
        assert!(!has_root_within(&[0.5], 1.001));
        assert!(has_root_within(&[1.0], 1.001));
        assert!(has_root_within(&[0.9995], 1.001));
        // (1 − 0.5z)(1 − 0.4z) = 1 − 0.9z + 0.2z²
        assert!(!has_root_within(&[0.9, -0.2], 1.001));
        assert!(has_root_within(&[1.5, -0.5], 1.001)); // unit root
    }

    proptest! {
        #[test]
        fn undifference_inverts_difference(xs in proptest::collection::vec(-100.0f64..100.0, 6..40), d in 0usize..3) {
            // Split into history and continuation; integrating the continuation's
            // differences from the history's tail must reproduce it exactly.
            let cut = xs.len() / 2;
            let full = difference(&xs, d).unwrap();
            let future = &full[cut - d..];
            let rebuilt = undifference(future, &xs[cut - d..cut]).unwrap();
            for (a, b) in rebuilt.iter().zip(&xs[cut..]) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
