//! Regression stack: pooled OLS, two-way fixed effects, dynamic LSDV,
//! difference and system GMM, heterogeneity interactions and the long-run
//! elasticity, all with region-clustered inference.

mod elasticity;
pub mod gmm;
mod ols;
mod types;
mod vcov;
mod within;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

pub use elasticity::{long_run_elasticity, ElasticityReport};
pub use gmm::{build_ab_instruments, fit_diff_gmm, fit_gmm, fit_sys_gmm, InstrumentColumn, InstrumentSet};
pub use ols::fit_pooled_ols;
pub use types::{
    Coefficient, EstimatorTag, FitNote, FitResult, GmmOptions, GmmSteps, GmmSummary, RegressionSpec, ResidualPanel,
    Term, WithinSample,
};
pub use vcov::cluster_robust_vcov;
pub use within::{fit_dynamic_lsdv, fit_heterogeneous, fit_twoway_fe, HeterogeneousFit};

use crate::error::{Error, Result};
use crate::panel::Panel;

/// Two-sided p-value of a z statistic under the standard normal.
pub fn normal_p_value(z: f64) -> f64 {
    if !z.is_finite() {
        return if z.is_nan() { f64::NAN } else { 0.0 };
    }
    let normal = Normal::standard();
    (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0)
}

pub(crate) fn coefficient(name: &str, estimate: f64, variance: f64) -> Coefficient {
    let std_error = variance.max(0.0).sqrt();
    let p_value = if std_error > 0.0 { normal_p_value(estimate / std_error) } else { f64::NAN };
    Coefficient { name: name.to_string(), estimate, std_error, p_value }
}

pub(crate) fn coefficient_table(names: &[String], beta: &DVector<f64>, vcov: &DMatrix<f64>) -> Vec<Coefficient> {
    names.iter().enumerate().map(|(j, n)| coefficient(n, beta[j], vcov[(j, j)])).collect()
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Rows of the panel usable for a given response and term list.
#[derive(Debug, Clone)]
pub(crate) struct Sample {
    /// `(region, year_idx)` in region-major, year-ascending order.
    pub rows: Vec<(usize, usize)>,
    pub y: Vec<f64>,
    pub names: Vec<String>,
    /// Column-major regressor values.
    pub x: Vec<Vec<f64>>,
}

impl Sample {
    /// Drops rows where any term is unavailable or the year is excluded.
    pub fn build(panel: &Panel, response: &str, terms: &[Term], exclude_years: &[i32]) -> Result<Sample> {
        let (n, t) = (panel.n_regions(), panel.n_years());
        for y in exclude_years {
            if panel.year_index(*y).is_none() {
                return Err(Error::InvalidSpec(format!("excluded year {y} is not in the panel")));
            }
        }
        let y_vals = panel.variable(response)?;
        let grids = terms.iter().map(|term| term.grid(panel)).collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut x = vec![Vec::new(); terms.len()];
        for i in 0..n {
            for s in 0..t {
                if exclude_years.contains(&panel.years()[s]) {
                    continue;
                }
                let vals: Option<Vec<f64>> = grids.iter().map(|g| g.get(i, s)).collect();
                if let Some(vals) = vals {
                    rows.push((i, s));
                    y.push(y_vals[i * t + s]);
                    for (col, v) in x.iter_mut().zip(vals) {
                        col.push(v);
                    }
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::InsufficientData("estimation sample is empty".into()));
        }
        Ok(Sample { rows, y, names: terms.iter().map(Term::name).collect(), x })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn clusters(&self) -> Vec<usize> {
        self.rows.iter().map(|&(i, _)| i).collect()
    }

    pub fn n_clusters(&self) -> usize {
        let mut c = self.clusters();
        c.dedup();
        c.len()
    }
}
