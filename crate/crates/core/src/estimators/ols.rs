use nalgebra::{DMatrix, DVector};

use super::types::{EstimatorTag, FitResult, RegressionSpec, ResidualPanel};
use super::vcov::sandwich;
use super::{coefficient_table, matrix_rows, Sample};
use crate::error::Result;
use crate::linalg::least_squares;
use crate::panel::Panel;

/// Pooled least squares with optional intercept and explicit region / year
/// indicator columns (the dummy-variable route to fixed effects).
///
/// With an intercept or region indicators present, the first region and the
/// first sampled year are the omitted categories.
pub fn fit_pooled_ols(panel: &Panel, spec: &RegressionSpec) -> Result<FitResult> {
    spec.validate()?;
    let sample = Sample::build(panel, &spec.response, &spec.regressors, &spec.exclude_years)?;
    let n = sample.len();

    let mut names: Vec<String> = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    if spec.intercept {
        names.push("_cons".into());
        cols.push(vec![1.0; n]);
    }
    names.extend(sample.names.iter().cloned());
    cols.extend(sample.x.iter().cloned());

    if spec.region_effects {
        let skip = usize::from(spec.intercept);
        for (i, region) in panel.regions().iter().enumerate().skip(skip) {
            names.push(format!("region[{region}]"));
            cols.push(sample.rows.iter().map(|&(r, _)| f64::from(u8::from(r == i))).collect());
        }
    }
    if spec.time_effects {
        let mut years: Vec<usize> = sample.rows.iter().map(|&(_, s)| s).collect();
        years.sort_unstable();
        years.dedup();
        let skip = usize::from(spec.intercept || spec.region_effects);
        for &s in years.iter().skip(skip) {
            names.push(format!("year[{}]", panel.years()[s]));
            cols.push(sample.rows.iter().map(|&(_, ys)| f64::from(u8::from(ys == s))).collect());
        }
    }

    let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    let y = DVector::from_vec(sample.y.clone());
    let ls = least_squares(&x, &y, &names)?;
    let resid = &y - &x * &ls.coefficients;
    let vcov = sandwich(&ls.xtx_inv, &x, &resid, &sample.clusters(), 0)?;

    let mut residuals = ResidualPanel::new(panel.regions().to_vec(), panel.years().to_vec());
    for (row, &(i, s)) in sample.rows.iter().enumerate() {
        residuals.set(i, s, resid[row]);
    }

    Ok(FitResult {
        estimator: EstimatorTag::Pooled,
        response: spec.response.clone(),
        coefficients: coefficient_table(&names, &ls.coefficients, &vcov),
        vcov: matrix_rows(&vcov),
        n_obs: n,
        n_clusters: sample.n_clusters(),
        within_r2: None,
        rss: resid.norm_squared(),
        tss_within: None,
        notes: Vec::new(),
        gmm: None,
        residuals,
        within_sample: None,
        gmm_state: None,
    })
}
