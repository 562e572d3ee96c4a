//! Seeded synthetic series for tests, benches and the offline demo dataset.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::preprocess::{parse_datetime, TimeSeries};

fn normal_draws(n: usize, sd: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sd).expect("finite non-negative sd");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

/// i.i.d. N(0, sd²).
pub fn white_noise(n: usize, sd: f64, seed: u64) -> Vec<f64> {
    normal_draws(n, sd, seed)
}

/// Cumulative sum of white noise, starting at the first draw.
pub fn random_walk(n: usize, sd: f64, seed: u64) -> Vec<f64> {
    let mut acc = 0.0;
    normal_draws(n, sd, seed)
        .into_iter()
        .map(|e| {
            acc += e;
            acc
        })
        .collect()
}

/// `xₜ = c + Σφᵢxₜ₋ᵢ + εₜ + Σθⱼεₜ₋ⱼ` after a burn-in of 500 steps.
pub fn simulate_arma(ar: &[f64], ma: &[f64], c: f64, sd: f64, n: usize, seed: u64) -> Vec<f64> {
    const BURN: usize = 500;
    let e = normal_draws(n + BURN, sd, seed);
    let mut x = vec![0.0; n + BURN];
    for t in 0..n + BURN {
        let mut v = c + e[t];
        for (i, phi) in ar.iter().enumerate() {
            if t > i {
                v += phi * x[t - i - 1];
            }
        }
        for (j, theta) in ma.iter().enumerate() {
            if t > j {
                v += theta * e[t - j - 1];
            }
        }
        x[t] = v;
    }
    x.split_off(BURN)
}

/// Hourly load-like series from 2012-01-01: a daily and a weekly sine on a
/// slow upward trend plus Gaussian noise. Values are in MW, around 30 GW.
pub fn seasonal_load(n: usize, seed: u64) -> TimeSeries {
    use std::f64::consts::TAU;
    let noise = white_noise(n, 300.0, seed);
    let values = (0..n)
        .map(|t| {
            let h = t as f64;
            30_000.0
                + 2_000.0 * h / 8_760.0
                + 5_000.0 * (TAU * (h - 9.0) / 24.0).sin()
                + 2_000.0 * (TAU * h / 168.0).sin()
                + noise[t]
        })
        .collect();
    let start = parse_datetime("2012-01-01 00:00:00").expect("valid literal");
    TimeSeries::hourly(start, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_sized() {
        assert_eq!(white_noise(10, 1.0, 3), white_noise(10, 1.0, 3));
        assert_ne!(white_noise(10, 1.0, 3), white_noise(10, 1.0, 4));
        assert_eq!(simulate_arma(&[0.5], &[0.2], 0.0, 1.0, 123, 1).len(), 123);
    }

    #[test]
    fn walk_differences_are_the_noise() {
        let w = random_walk(50, 1.0, 2);
        let e = white_noise(50, 1.0, 2);
        for t in 1..50 {
            assert!((w[t] - w[t - 1] - e[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn seasonal_load_is_hourly_and_positive() {
        let s = seasonal_load(500, 1);
        assert_eq!(s.len(), 500);
        assert!(s.values.iter().all(|v| *v > 10_000.0));
        assert_eq!(s.timestamps[1] - s.timestamps[0], 3600);
    }
}
