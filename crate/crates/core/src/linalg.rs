//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative threshold on `|R_jj| / |R_00|` below which a pivoted column counts as collinear.
const RANK_TOL: f64 = 1e-10;

/// Least-squares solution computed from a QR factorization of the design.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub coefficients: DVector<f64>,
    /// `(X'X)^{-1}` assembled from the triangular factor, never from `X'X` itself.
    pub xtx_inv: DMatrix<f64>,
}

/// Solves `min ||y - X b||` via Householder QR.
///
/// A column-pivoted factorization is used first to detect rank deficiency; the
/// error names every column the pivoting pushed past the numerical rank.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, names: &[String]) -> Result<LeastSquares> {
    let (n, k) = x.shape();
    if k == 0 {
        return Err(Error::InvalidSpec("design has no columns".into()));
    }
    if n < k {
        return Err(Error::InsufficientData(format!("{n} observations for {k} coefficients")));
    }
    let collinear = collinear_columns(x);
    if !collinear.is_empty() {
        return Err(Error::RankDeficient(collinear.into_iter().map(|j| names[j].clone()).collect()));
    }

    let qr = x.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * y;
    let coefficients = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::Numerical("triangular inverse failed".into()))?;
    let xtx_inv = symmetrize(&(&r_inv * r_inv.transpose()));
    Ok(LeastSquares { coefficients, xtx_inv })
}

/// Indices of columns that are numerically linear combinations of earlier-pivoted ones.
pub fn collinear_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let k = x.ncols();
    if k == 0 || x.nrows() == 0 {
        return Vec::new();
    }
    let scale: Vec<f64> = x.column_iter().map(|c| c.norm()).collect();
    let mut out: Vec<usize> = scale.iter().enumerate().filter(|(_, &s)| s == 0.0).map(|(j, _)| j).collect();
    // Pivoting on unit-norm columns makes the tolerance independent of units.
    let mut xs = x.clone();
    for (j, mut col) in xs.column_iter_mut().enumerate() {
        if scale[j] > 0.0 {
            col /= scale[j];
        }
    }
    let qr = xs.col_piv_qr();
    let r = qr.r();
    let diag_max = r[(0, 0)].abs();
    let mut perm = DMatrix::<f64>::identity(k, k);
    qr.p().permute_columns(&mut perm);
    let rank = (0..k.min(r.nrows())).take_while(|&j| r[(j, j)].abs() > RANK_TOL * diag_max).count();
    for pos in rank..k {
        let original = (0..k).find(|&row| perm[(row, pos)] == 1.0).unwrap_or(pos);
        if !out.contains(&original) {
            out.push(original);
        }
    }
    out.sort_unstable();
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Moore–Penrose inverse of a symmetric matrix. The flag is true when the
/// input was numerically rank deficient.
pub fn pinv_symmetric(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrize(m));
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let tol = max_abs * n as f64 * f64::EPSILON;
    let mut deficient = false;
    let inv_vals = eig.eigenvalues.map(|v| {
        if v.abs() > tol && max_abs > 0.0 {
            1.0 / v
        } else {
            deficient = true;
            0.0
        }
    });
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&inv_vals) * q.transpose();
    (symmetrize(&out), deficient)
}

/// Inverts a small symmetric positive definite matrix (Cholesky, then LU).
pub fn inverse_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    if let Some(ch) = sym.clone().cholesky() {
        return Ok(symmetrize(&ch.inverse()));
    }
    sym.try_inverse()
        .map(|inv| symmetrize(&inv))
        .ok_or_else(|| Error::Numerical("matrix is singular".into()))
}
