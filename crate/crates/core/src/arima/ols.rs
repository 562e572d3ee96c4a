//! Least squares via Householder QR.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct LsFit {
    pub beta: Vec<f64>,
    pub rss: f64,
    pub nobs: usize,
    /// Diagonal of `(XᵀX)⁻¹`.
    pub xtx_inv_diag: Vec<f64>,
}

impl LsFit {
    /// Standard error of coefficient `j` with `s² = RSS/(n − k)`.
    pub fn std_error(&self, j: usize) -> f64 {
        let dof = (self.nobs - self.beta.len()) as f64;
        (self.rss / dof * self.xtx_inv_diag[j]).sqrt()
    }
}

pub(crate) fn least_squares(x: DMatrix<f64>, y: &[f64]) -> Result<LsFit> {
    let (n, k) = x.shape();
    if n <= k || y.len() != n {
        return Err(Error::Fit(format!("least squares with {n} rows and {k} columns")));
    }
    let qr = x.qr();
    let mut qty = DVector::from_column_slice(y);
    qr.q_tr_mul(&mut qty);
    let r = qr.r();
    for i in 0..k {
        if r[(i, i)].abs() < 1e-12 * r[(0, 0)].abs().max(1e-300) {
            return Err(Error::Fit("rank-deficient regression".into()));
        }
    }
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Fit("singular R factor".into()))?;
    let head = qty.rows(0, k).into_owned();
    let beta = &r_inv * head;
    let rss = qty.rows(k, n - k).iter().map(|v| v * v).sum();
    let xtx_inv_diag = (0..k)
        .map(|i| r_inv.row(i).iter().map(|v| v * v).sum())
        .collect();
    Ok(LsFit {
        beta: beta.iter().copied().collect(),
        rss,
        nobs: n,
        xtx_inv_diag,
    })
}

/// Residual sums of squares of the nested regressions on the first
/// `1..=k` columns of `x`, from a single QR factorisation.
pub(crate) fn nested_rss(x: DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>> {
    let (n, k) = x.shape();
    if n <= k || y.len() != n {
        return Err(Error::Fit(format!("least squares with {n} rows and {k} columns")));
    }
    let qr = x.qr();
    let mut qty = DVector::from_column_slice(y);
    qr.q_tr_mul(&mut qty);
    let mut tail: f64 = qty.rows(k, n - k).iter().map(|v| v * v).sum();
    let mut out = vec![0.0; k];
    for j in (0..k).rev() {
        out[j] = tail;
        tail += qty[j] * qty[j];
    }
    Ok(out)
}
