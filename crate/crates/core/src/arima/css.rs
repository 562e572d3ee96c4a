//! Conditional-sum-of-squares estimation with BFGS.

use nalgebra::DMatrix;

use super::ols::least_squares;
use super::{difference, has_root_within, innovations, ArimaModel, ArimaOrder, ForecastTail};
use crate::error::{Error, Result};

const ROOT_BOUND: f64 = 1.001;

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence threshold on the sup-norm of the normalised-objective gradient.
    pub gtol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 200,
            gtol: 1e-8,
        }
    }
}

/// Fits `order` to the level series `series`, starting from a Hannan-Rissanen
/// estimate.
pub fn fit_css(series: &[f64], order: ArimaOrder) -> Result<ArimaModel> {
    fit_css_from(series, order, None, FitOptions::default())
}

/// As [`fit_css`], optionally starting from an earlier model's coefficients.
pub fn fit_css_from(
    series: &[f64],
    order: ArimaOrder,
    start: Option<&ArimaModel>,
    opts: FitOptions,
) -> Result<ArimaModel> {
    let ArimaOrder { p, d, q } = order;
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("series contains non-finite values".into()));
    }
    let w = difference(series, d)?;
    let need = 10 * (p + q + 1);
    if w.len() < need {
        return Err(Error::TooShort {
            required: need + d,
            actual: series.len(),
        });
    }
    // Work on the standardised series; coefficients map back exactly.
    let n = w.len();
    let mean = w.iter().sum::<f64>() / n as f64;
    let sd = {
        let v = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        if v > 0.0 {
            v.sqrt()
        } else {
            1.0
        }
    };
    let z: Vec<f64> = w.iter().map(|x| (x - mean) / sd).collect();
    let problem = Css { z: &z, p, q };

    let mut x0 = match start {
        Some(m) if m.order == order => {
            let phi_sum: f64 = m.ar_coeffs.iter().sum();
            let mut v = vec![(m.intercept - mean * (1.0 - phi_sum)) / sd];
            v.extend(&m.ar_coeffs);
            v.extend(&m.ma_coeffs);
            v
        }
        _ => hannan_rissanen(&z, p, q),
    };
    if !problem.value(&x0).is_finite() {
        x0 = vec![0.0; 1 + p + q];
    }

    let outcome = bfgs(&problem, x0, opts);
    let model = problem.to_model(order, &outcome.x, mean, sd, series, outcome.trace)?;
    if outcome.converged {
        Ok(model)
    } else {
        Err(Error::NotConverged {
            iterations: opts.max_iter,
            best: Box::new(model),
        })
    }
}

struct Css<'a> {
    z: &'a [f64],
    p: usize,
    q: usize,
}

impl Css<'_> {
    fn n_eff(&self) -> usize {
        self.z.len() - self.p
    }

    fn split<'x>(&self, x: &'x [f64]) -> (f64, &'x [f64], &'x [f64]) {
        (x[0], &x[1..1 + self.p], &x[1 + self.p..])
    }

    /// Mean squared innovation.
    fn value(&self, x: &[f64]) -> f64 {
        let (c, ar, ma) = self.split(x);
        let e = innovations(self.z, c, ar, ma);
        e[self.p..].iter().map(|v| v * v).sum::<f64>() / self.n_eff() as f64
    }

    /// Mean squared innovation and its gradient, differentiating the
    /// innovation recursion forward in time.
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let (p, q) = (self.p, self.q);
        let k = 1 + p + q;
        let (c, ar, ma) = self.split(x);
        let z = self.z;
        let n = z.len();
        let mut e = vec![0.0; n];
        let mut de = vec![0.0; n * k];
        let mut ss = 0.0;
        let mut grad = vec![0.0; k];
        for t in p..n {
            let mut v = z[t] - c;
            for i in 1..=p {
                v -= ar[i - 1] * z[t - i];
            }
            for j in 1..=q.min(t - p) {
                v -= ma[j - 1] * e[t - j];
            }
            e[t] = v;
            let (before, row) = de.split_at_mut(t * k);
            let row = &mut row[..k];
            row[0] = -1.0;
            for i in 1..=p {
                row[i] = -z[t - i];
            }
            for j in 1..=q {
                row[p + j] = if t >= p + j { -e[t - j] } else { 0.0 };
            }
            for j in 1..=q.min(t - p) {
                let prev = &before[(t - j) * k..(t - j + 1) * k];
                let th = ma[j - 1];
                for (r, pv) in row.iter_mut().zip(prev) {
                    *r -= th * pv;
                }
            }
            ss += v * v;
            for (g, r) in grad.iter_mut().zip(row.iter()) {
                *g += 2.0 * v * r;
            }
        }
        let scale = 1.0 / self.n_eff() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        (ss * scale, grad)
    }

    fn to_model(
        &self,
        order: ArimaOrder,
        x: &[f64],
        mean: f64,
        sd: f64,
        series: &[f64],
        trace: Vec<f64>,
    ) -> Result<ArimaModel> {
        let (c_std, ar, ma) = self.split(x);
        let phi_sum: f64 = ar.iter().sum();
        let intercept = sd * c_std + mean * (1.0 - phi_sum);
        let sigma2 = self.value(x) * sd * sd;
        let mut warnings = Vec::new();
        if has_root_within(ar, ROOT_BOUND) {
            warnings.push("AR polynomial has a root within 1.001 of the unit circle (non-stationary)".into());
        }
        let neg_ma: Vec<f64> = ma.iter().map(|t| -t).collect();
        if has_root_within(&neg_ma, ROOT_BOUND) {
            warnings.push("MA polynomial has a root within 1.001 of the unit circle (non-invertible)".into());
        }
        let mut model = ArimaModel {
            order,
            ar_coeffs: ar.to_vec(),
            ma_coeffs: ma.to_vec(),
            intercept,
            sigma2,
            n_effective: self.n_eff(),
            tail: ForecastTail::default(),
            warnings,
            objective_trace: trace,
        };
        model.tail = model.tail_at(series, &[series.len()])?.pop().unwrap();
        Ok(model)
    }
}

/// Long-autoregression residuals stand in for the innovations, then one
/// regression on lagged values and lagged residuals gives the start point.
fn hannan_rissanen(z: &[f64], p: usize, q: usize) -> Vec<f64> {
    let n = z.len();
    let mean = z.iter().sum::<f64>() / n as f64;
    let fallback = || {
        let mut v = vec![0.0; 1 + p + q];
        v[0] = mean;
        v
    };
    if p == 0 && q == 0 {
        return fallback();
    }
    let lagged_fit = |lags: usize, resid: Option<(&[f64], usize)>, start: usize| {
        let extra = resid.map_or(0, |(_, k)| k);
        let rows = n - start;
        let x = DMatrix::from_fn(rows, 1 + lags + extra, |r, col| {
            let t = start + r;
            if col == 0 {
                1.0
            } else if col <= lags {
                z[t - col]
            } else {
                let (e, _) = resid.unwrap();
                e[t - (col - lags)]
            }
        });
        least_squares(x, &z[start..])
    };

    let mut x = if q == 0 {
        match lagged_fit(p, None, p) {
            Ok(fit) => fit.beta,
            Err(_) => return fallback(),
        }
    } else {
        let m = ((10.0 * (n as f64).log10()).ceil() as usize)
            .max(p + q + 1)
            .min(n / 4);
        let Ok(long) = lagged_fit(m, None, m) else {
            return fallback();
        };
        let mut e = vec![0.0; n];
        for t in m..n {
            let mut v = z[t] - long.beta[0];
            for i in 1..=m {
                v -= long.beta[i] * z[t - i];
            }
            e[t] = v;
        }
        let start = m + q.max(p);
        if n <= start + 2 * (1 + p + q) {
            return fallback();
        }
        match lagged_fit(p, Some((&e, q)), start) {
            Ok(fit) => fit.beta,
            Err(_) => return fallback(),
        }
    };

    // Pull an explosive or non-invertible start back inside the unit circle.
    for _ in 0..10 {
        let ar = &x[1..1 + p];
        let neg_ma: Vec<f64> = x[1 + p..].iter().map(|t| -t).collect();
        if !has_root_within(ar, ROOT_BOUND) && !has_root_within(&neg_ma, ROOT_BOUND) {
            return x;
        }
        x[1..].iter_mut().for_each(|v| *v *= 0.5);
    }
    x[1..].iter_mut().for_each(|v| *v = 0.0);
    x
}

struct BfgsOutcome {
    x: Vec<f64>,
    converged: bool,
    trace: Vec<f64>,
}

fn bfgs(problem: &Css<'_>, x0: Vec<f64>, opts: FitOptions) -> BfgsOutcome {
    let k = x0.len();
    let mut x = x0;
    let (mut f, mut g) = problem.value_grad(&x);
    let mut h = identity(k);
    let mut trace = vec![f];
    let mut stalls = 0;
    for _ in 0..opts.max_iter {
        if sup_norm(&g) < opts.gtol {
            return BfgsOutcome {
                x,
                converged: true,
                trace,
            };
        }
        let mut dir = mat_vec(&h, &g);
        dir.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            h = identity(k);
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let mut step = 1.0;
        let accepted = loop {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
            let ft = problem.value(&trial);
            if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                break Some((trial, ft));
            }
            step *= 0.5;
            if step < 1e-12 {
                break None;
            }
        };
        // No descent possible at machine precision: x is a stationary point.
        let Some((x_new, _)) = accepted else {
            return BfgsOutcome {
                x,
                converged: true,
                trace,
            };
        };
        let (f_new, g_new) = problem.value_grad(&x_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-16 {
            bfgs_update(&mut h, &s, &y, sy);
        }
        stalls = if f - f_new <= 1e-15 * f.abs().max(1e-300) {
            stalls + 1
        } else {
            0
        };
        x = x_new;
        f = f_new;
        g = g_new;
        trace.push(f);
        if stalls >= 3 {
            return BfgsOutcome {
                x,
                converged: true,
                trace,
            };
        }
    }
    let converged = sup_norm(&g) < opts.gtol;
    BfgsOutcome { x, converged, trace }
}

fn identity(k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Inverse-Hessian BFGS update `H ← (I − ρsyᵀ)H(I − ρysᵀ) + ρssᵀ`.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let k = s.len();
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    for i in 0..k {
        for j in 0..k {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{simulate_arma, white_noise};

    #[test]
    fn recovers_ar1() {
        let x = simulate_arma(&[0.7], &[], 0.0, 1.0, 5000, 21);
        let m = fit_css(&x, ArimaOrder::new(1, 0, 0)).unwrap();
        assert!((0.65..=0.75).contains(&m.ar_coeffs[0]), "{m:?}");
        assert!(m.warnings.is_empty());
    }

    #[test]
    fn recovers_ma1() {
        let x = simulate_arma(&[], &[0.5], 0.0, 1.0, 5000, 22);
        let m = fit_css(&x, ArimaOrder::new(0, 0, 1)).unwrap();
        assert!((0.43..=0.57).contains(&m.ma_coeffs[0]), "{m:?}");
    }

    #[test]
    fn intercept_only_is_sample_mean() {
        let x: Vec<f64> = white_noise(2000, 2.0, 5).iter().map(|v| v + 10.0).collect();
        let m = fit_css(&x, ArimaOrder::new(0, 0, 0)).unwrap();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        assert!((m.intercept - mean).abs() < 1e-6);
        assert!(m.sigma2 >= 0.0);
    }

    #[test]
    fn objective_never_increases() {
        let x = simulate_arma(&[0.5, -0.2], &[0.4], 3.0, 1.0, 3000, 8);
        let m = fit_css(&x, ArimaOrder::new(2, 0, 1)).unwrap();
        assert!(m.objective_trace.len() > 1);
        for w in m.objective_trace.windows(2) {
            assert!(w[1] <= w[0], "{:?}", m.objective_trace);
        }
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let x = simulate_arma(&[0.4], &[0.3, -0.2], 0.0, 1.0, 400, 2);
        let problem = Css { z: &x, p: 1, q: 2 };
        let at = [0.1, 0.3, 0.2, -0.1];
        let (_, g) = problem.value_grad(&at);
        for i in 0..at.len() {
            let mut a = at;
            let mut b = at;
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let num = (problem.value(&a) - problem.value(&b)) / 2e-6;
            assert!((num - g[i]).abs() < 1e-6 * num.abs().max(1.0), "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn too_short_rejected() {
        let x = white_noise(15, 1.0, 1);
        assert!(matches!(fit_css(&x, ArimaOrder::new(1, 0, 1)), Err(Error::TooShort { .. })));
    }

    #[test]
    fn unit_root_flagged() {
        // A random walk fitted without differencing pushes φ to the unit circle.
        let x = crate::synthetic::random_walk(3000, 1.0, 12);
        let m = match fit_css(&x, ArimaOrder::new(1, 0, 0)) {
            Ok(m) => m,
            Err(Error::NotConverged { best, .. }) => *best,
            Err(e) => panic!("{e}"),
        };
        assert!(m.ar_coeffs[0] > 0.99);
    }

    #[test]
    fn warm_start_reaches_same_optimum() {
        let x = simulate_arma(&[0.6], &[0.3], 1.0, 1.0, 3000, 17);
        let order = ArimaOrder::new(1, 0, 1);
        let cold = fit_css(&x, order).unwrap();
        let warm = fit_css_from(&x, order, Some(&cold), FitOptions::default()).unwrap();
        assert!((cold.ar_coeffs[0] - warm.ar_coeffs[0]).abs() < 1e-6);
        assert!((cold.ma_coeffs[0] - warm.ma_coeffs[0]).abs() < 1e-6);
    }
}
