//! Specification tests: Arellano–Bond AR(m), Hansen J, Durbin–Watson,
//! Jarque–Bera and within R².
//!
//! All p-values come from asymptotic reference distributions.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::estimators::{normal_p_value, FitResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Degrees of freedom; present exactly when the reference is chi-square.
    pub df: Option<usize>,
    pub verdict_note: String,
}

impl TestResult {
    fn new(statistic: f64, p_value: f64, df: Option<usize>) -> Self {
        let p_value = p_value.clamp(0.0, 1.0);
        let verdict_note = if p_value < 0.05 { "reject at 5%" } else { "fail to reject at 5%" }.to_string();
        Self { statistic, p_value, df, verdict_note }
    }

    pub fn rejects_at(&self, level: f64) -> bool {
        self.p_value < level
    }
}

pub fn chi_square_p_value(statistic: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("df > 0");
    (1.0 - dist.cdf(statistic.max(0.0))).clamp(0.0, 1.0)
}

/// Arellano–Bond test for order-`m` serial correlation in the differenced residuals.
///
/// `z = Σ_i w_i'u_i / sqrt(V)` where `w_i` holds the residuals lagged `m`
/// periods and `V` includes the correction for the estimated coefficients.
pub fn ar_test(fit: &FitResult, m: usize) -> Result<TestResult> {
    if !(1..=2).contains(&m) {
        return Err(Error::InvalidSpec(format!("AR order must be 1 or 2, got {m}")));
    }
    let state = fit
        .gmm_state
        .as_ref()
        .ok_or_else(|| Error::InvalidSpec("AR(m) test requires a GMM fit".into()))?;
    let t = fit.residuals.years.len();
    if t < 1 || t - 1 <= m + 1 {
        return Err(Error::InsufficientData(format!("AR({m}) needs T - 1 > {}, got T = {t}", m + 1)));
    }

    let k = state.xz.nrows();
    let l = state.xz.ncols();
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    let mut wx = DVector::<f64>::zeros(k);
    let mut zua = DVector::<f64>::zeros(l);
    let mut pairs = 0usize;
    for (block, u) in state.blocks.iter().zip(&state.residuals) {
        let mut a = 0.0;
        for (row, year) in block.diff_year.iter().enumerate() {
            let Some(tau) = *year else { continue };
            let Some(lag_row) = tau
                .checked_sub(m)
                .and_then(|lt| block.diff_year.iter().position(|y| *y == Some(lt)))
            else {
                continue;
            };
            let w = u[lag_row];
            a += w * u[row];
            wx += block.x.row(row).transpose() * w;
            pairs += 1;
        }
        d0 += a;
        d1 += a * a;
        zua += block.z.transpose() * u * a;
    }
    if pairs == 0 {
        return Err(Error::InsufficientData(format!("no residual pairs {m} periods apart")));
    }
    let vcov = &state.vcov;
    let d2 = -2.0 * (wx.transpose() * &state.bread * &state.xz * &state.weight * &zua)[(0, 0)];
    let d3 = (wx.transpose() * vcov * &wx)[(0, 0)];
    let var = d1 + d2 + d3;
    if d1 <= 0.0 || !(var > 0.0) {
        return Err(Error::DegenerateVariance(format!("AR({m}) variance is {var:e}")));
    }
    let z = d0 / var.sqrt();
    Ok(TestResult::new(z, normal_p_value(z), None))
}

/// Hansen overidentification test: the minimized efficient-weighting GMM objective.
pub fn hansen_j(fit: &FitResult) -> Result<TestResult> {
    let gmm = fit
        .gmm
        .as_ref()
        .ok_or_else(|| Error::InvalidSpec("Hansen J requires a GMM fit".into()))?;
    let df = usize::try_from(gmm.hansen_df)
        .map_err(|_| Error::InvalidSpec(format!("underidentified fit (df = {})", gmm.hansen_df)))?;
    let stat = gmm.hansen_statistic;
    Ok(TestResult::new(stat, chi_square_p_value(stat, df), Some(df)))
}

/// Panel Durbin–Watson: within-region sums of squared differences over the
/// pooled sum of squares. Each inner slice is one region in time order.
pub fn durbin_watson(series: &[Vec<f64>]) -> Result<f64> {
    let total: usize = series.iter().map(Vec::len).sum();
    if total < 2 {
        return Err(Error::InsufficientData("Durbin–Watson needs at least two residuals".into()));
    }
    let num: f64 = series.iter().flat_map(|s| s.windows(2).map(|w| (w[1] - w[0]).powi(2))).sum();
    let den: f64 = series.iter().flatten().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::DegenerateVariance("Durbin–Watson undefined for all-zero residuals".into()));
    }
    Ok(num / den)
}

pub fn durbin_watson_fit(fit: &FitResult) -> Result<f64> {
    let series: Vec<Vec<f64>> = (0..fit.residuals.regions.len()).map(|i| fit.residuals.region_series(i)).collect();
    durbin_watson(&series)
}

/// Biased (moment) skewness and non-excess kurtosis.
pub fn skewness_kurtosis(x: &[f64]) -> Result<(f64, f64)> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if m2 <= 0.0 {
        return Err(Error::DegenerateVariance("zero variance".into()));
    }
    let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    Ok((m3 / m2.powf(1.5), m4 / (m2 * m2)))
}

/// `JB = n/6 (S² + (K - 3)²/4)`, chi-square(2).
pub fn jarque_bera(residuals: &[f64]) -> Result<TestResult> {
    if residuals.len() < 8 {
        return Err(Error::InsufficientData(format!("Jarque–Bera needs n >= 8, got {}", residuals.len())));
    }
    let (s, k) = skewness_kurtosis(residuals)?;
    let n = residuals.len() as f64;
    let jb = n / 6.0 * (s * s + (k - 3.0).powi(2) / 4.0);
    Ok(TestResult::new(jb, chi_square_p_value(jb, 2), Some(2)))
}

pub fn within_r2(fit: &FitResult) -> Result<f64> {
    let tss = fit
        .tss_within
        .ok_or_else(|| Error::InvalidSpec("within R² is defined only for within-transformed fits".into()))?;
    if tss <= 0.0 {
        return Err(Error::DegenerateVariance("zero total sum of squares".into()));
    }
    Ok(1.0 - fit.rss / tss)
}

/// All diagnostics applicable to one fit; inapplicable or failed tests carry the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub ar1: Outcome<TestResult>,
    pub ar2: Outcome<TestResult>,
    pub hansen_j: Outcome<TestResult>,
    pub durbin_watson: Outcome<f64>,
    pub jarque_bera: Outcome<TestResult>,
    pub within_r2: Outcome<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome<T> {
    Value(T),
    NotApplicable(String),
}

impl<T> From<Result<T>> for Outcome<T> {
    fn from(r: Result<T>) -> Self {
        match r {
            Ok(v) => Outcome::Value(v),
            Err(e) => Outcome::NotApplicable(e.to_string()),
        }
    }
}

pub fn diagnose(fit: &FitResult) -> DiagnosticReport {
    DiagnosticReport {
        ar1: ar_test(fit, 1).into(),
        ar2: ar_test(fit, 2).into(),
        hansen_j: hansen_j(fit).into(),
        durbin_watson: durbin_watson_fit(fit).into(),
        jarque_bera: jarque_bera(&fit.residuals.values()).into(),
        within_r2: within_r2(fit).into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn durbin_watson_fixtures() {
        assert_eq!(durbin_watson(&[vec![1.0, 1.0, 1.0, 1.0]]).unwrap(), 0.0);
        assert_eq!(durbin_watson(&[vec![1.0, -1.0, 1.0, -1.0]]).unwrap(), 3.0);
        assert!(durbin_watson(&[vec![0.0, 0.0]]).is_err());
        assert!(durbin_watson(&[vec![1.0]]).is_err());
        // pooled: (0 + 4) / (2 + 2)
        assert_eq!(durbin_watson(&[vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap(), 1.0);
    }

    #[test]
    fn jarque_bera_symmetric_mesokurtic_sample() {
        // {±1 ×4, ±c ×1}, n = 10: S = 0 by symmetry, and K = 10(8+2c⁴)/(8+2c²)² = 3
        // reduces to c⁴ - 12c² - 14 = 0, so c² = 6 + √50.
        let c = (6.0 + 50f64.sqrt()).sqrt();
        let mut x = vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0, c, -c];
        let (s, k) = skewness_kurtosis(&x).unwrap();
        assert!(s.abs() < 1e-14);
        assert!((k - 3.0).abs() < 1e-12);
        let r = jarque_bera(&x).unwrap();
        assert!(r.statistic < 1e-20);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        assert_eq!(r.df, Some(2));
        x.truncate(7);
        assert!(jarque_bera(&x).is_err());
        assert!(jarque_bera(&[2.0; 9]).is_err());
    }

    #[test]
    fn chi_square_reference() {
        // P(χ²₂ > x) = exp(-x/2)
        assert!((chi_square_p_value(3.0, 2) - (-1.5f64).exp()).abs() < 1e-12);
        assert_eq!(chi_square_p_value(0.0, 0), 1.0);
    }

    proptest! {
        #[test]
        fn durbin_watson_scale_invariant(xs in proptest::collection::vec(-10.0f64..10.0, 3..40), c in 0.1f64..50.0, neg in any::<bool>()) {
            prop_assume!(xs.iter().any(|v| v.abs() > 1e-3));
            let c = if neg { -c } else { c };
            let a = durbin_watson(&[xs.clone()]).unwrap();
            let b = durbin_watson(&[xs.iter().map(|v| v * c).collect()]).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
            prop_assert!((0.0..=4.0).contains(&a));
        }

        #[test]
        fn jarque_bera_affine_invariant(xs in proptest::collection::vec(-10.0f64..10.0, 8..60), loc in -100.0f64..100.0, scale in 0.1f64..20.0) {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            prop_assume!(xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() > 1e-3);
            let a = jarque_bera(&xs).unwrap().statistic;
            let b = jarque_bera(&xs.iter().map(|v| loc + scale * v).collect::<Vec<_>>()).unwrap().statistic;
            prop_assert!((a - b).abs() < 1e-7 * a.max(1.0));
        }
    }
}
