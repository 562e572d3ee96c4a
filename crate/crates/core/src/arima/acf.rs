use crate::error::{Error, Result};

/// Sample autocorrelations for lags `0..=max_lag` (lag 0 is exactly 1).
pub fn acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = series.len();
    if n <= max_lag + 1 {
        return Err(Error::TooShort {
            required: max_lag + 2,
            actual: n,
        });
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let denom: f64 = centered.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return Err(Error::usage("autocorrelation of a constant series"));
    }
    let mut out = Vec::with_capacity(max_lag + 1);
    out.push(1.0);
    for k in 1..=max_lag {
        let num: f64 = centered[..n - k].iter().zip(&centered[k..]).map(|(a, b)| a * b).sum();
        out.push(num / denom);
    }
    Ok(out)
}

/// Partial autocorrelations for lags `0..=max_lag` via Durbin-Levinson.
pub fn pacf(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let r = acf(series, max_lag)?;
    Ok(pacf_from_acf(&r))
}

pub fn pacf_from_acf(r: &[f64]) -> Vec<f64> {
    let max_lag = r.len().saturating_sub(1);
    let mut out = vec![1.0];
    let mut phi: Vec<f64> = Vec::new();
    for k in 1..=max_lag {
        let num = r[k] - (1..k).map(|j| phi[j - 1] * r[k - j]).sum::<f64>();
        let den = 1.0 - (1..k).map(|j| phi[j - 1] * r[j]).sum::<f64>();
        let kk = if den.abs() < 1e-300 { 0.0 } else { num / den };
        let mut next = vec![0.0; k];
        for j in 1..k {
            next[j - 1] = phi[j - 1] - kk * phi[k - j - 1];
        }
        next[k - 1] = kk;
        phi = next;
        out.push(kk);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{simulate_arma, white_noise};

    #[test]
    fn lag_zero_is_one() {
        let r = acf(&[1.0, 3.0, 2.0, 5.0, 4.0], 2).unwrap();
        assert_eq!(r[0], 1.0);
    }

    #[test]
    fn constant_series_rejected() {
        assert!(acf(&[2.0; 10], 3).is_err());
        assert!(matches!(acf(&[1.0, 2.0], 1), Err(Error::TooShort { .. })));
    }

    #[test]
    fn white_noise_inside_band() {
        let x = white_noise(5000, 1.0, 11);
        let r = acf(&x, 10).unwrap();
        for k in 1..=10 {
            assert!(r[k].abs() < 0.05, "lag {k}: {}", r[k]);
        }
    }

    #[test]
    fn ar1_acf_and_pacf_cutoff() {
        let x = simulate_arma(&[0.8], &[], 0.0, 1.0, 10_000, 5);
        let r = acf(&x, 5).unwrap();
        assert!((0.75..=0.85).contains(&r[1]), "{}", r[1]);
        let p = pacf(&x, 5).unwrap();
        assert!((p[1] - r[1]).abs() < 1e-12);
        assert!(p[2].abs() < 0.05, "{}", p[2]);
    }
}
