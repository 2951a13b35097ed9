//! Cluster-robust (Liang–Zeger) sandwich covariance.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{least_squares, symmetrize};

/// `(X'X)^-1 (Σ_g X_g'u_g u_g'X_g) (X'X)^-1 · G/(G-1) · (n-1)/(n-k)`.
///
/// `absorbed` counts fixed effects partialled out before `x` was formed; they
/// enter `k` in the small-sample factor but have no column in `x`.
pub fn cluster_robust_vcov(
    x: &DMatrix<f64>,
    residuals: &DVector<f64>,
    clusters: &[usize],
    absorbed: usize,
) -> Result<DMatrix<f64>> {
    let names: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
    let bread = least_squares(x, residuals, &names)?.xtx_inv;
    sandwich(&bread, x, residuals, clusters, absorbed)
}

pub(crate) fn sandwich(
    bread: &DMatrix<f64>,
    x: &DMatrix<f64>,
    residuals: &DVector<f64>,
    clusters: &[usize],
    absorbed: usize,
) -> Result<DMatrix<f64>> {
    let (n, k) = x.shape();
    if clusters.len() != n || residuals.len() != n {
        return Err(Error::InvalidSpec("cluster and residual lengths must match the design".into()));
    }
    let mut scores: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
    for (row, &g) in clusters.iter().enumerate() {
        let s = scores.entry(g).or_insert_with(|| DVector::zeros(k));
        *s += x.row(row).transpose() * residuals[row];
    }
    let g = scores.len();
    if g < 2 {
        return Err(Error::InsufficientData("cluster-robust covariance needs at least two clusters".into()));
    }
    let mut meat = DMatrix::zeros(k, k);
    for s in scores.values() {
        meat += s * s.transpose();
    }
    let k_total = k + absorbed;
    if n <= k_total {
        return Err(Error::InsufficientData(format!("{n} observations for {k_total} parameters")));
    }
    let factor = (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n - k_total) as f64);
    Ok(symmetrize(&(bread * meat * bread * factor)))
}
