use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::types::{EstimatorTag, FitNote, FitResult, RegressionSpec, ResidualPanel, Term, WithinSample};
use super::vcov::sandwich;
use super::{coefficient_table, matrix_rows, Sample};
use crate::error::{Error, Result};
use crate::linalg::least_squares;
use crate::panel::{demean_region_values, demean_twoway_values, demean_year_values, is_region_constant, Panel};

/// Relative norm below which a demeaned column counts as having no within variation.
const WITHIN_TOL: f64 = 1e-9;

/// Two-way fixed effects via the closed-form double demeaning.
pub fn fit_twoway_fe(panel: &Panel, spec: &RegressionSpec) -> Result<FitResult> {
    if !(spec.region_effects && spec.time_effects) {
        return Err(Error::InvalidSpec("two-way FE requires both region and time effects".into()));
    }
    spec.validate()?;
    within_fit(panel, spec, &spec.regressors, EstimatorTag::Fe2w)
}

/// Within estimation of `e_it = α_i + γ_t + ρ e_{i,t-1} + β'x_it + u_it`.
///
/// The first lag of the response is prepended to the regressors and the first
/// year falls out of the sample. The result always carries
/// [`FitNote::NickellBias`].
pub fn fit_dynamic_lsdv(panel: &Panel, spec: &RegressionSpec) -> Result<FitResult> {
    if panel.n_years() < 3 {
        return Err(Error::InsufficientData(format!("dynamic LSDV needs T >= 3, got {}", panel.n_years())));
    }
    spec.validate()?;
    let lag = spec.lag_response_term();
    let mut terms = vec![lag.clone()];
    terms.extend(spec.regressors.iter().filter(|t| **t != lag).cloned());
    let mut fit = within_fit(panel, spec, &terms, EstimatorTag::LsdvDynamic)?;
    let periods = fit.residuals.cells.iter().take(panel.n_years()).flatten().count();
    fit.notes.push(FitNote::NickellBias { periods });
    if let Ok(rho) = fit.estimate(&lag.name()) {
        if rho.abs() >= 1.0 {
            fit.notes.push(FitNote::NonStationaryPersistence { rho });
        }
    }
    Ok(fit)
}

fn within_fit(panel: &Panel, spec: &RegressionSpec, terms: &[Term], tag: EstimatorTag) -> Result<FitResult> {
    if !spec.region_effects && !spec.time_effects {
        return Err(Error::InvalidSpec("within estimation needs region or time effects".into()));
    }
    if terms.is_empty() {
        return Err(Error::InvalidSpec("within estimation needs at least one regressor".into()));
    }
    let sample = Sample::build(panel, &spec.response, terms, &spec.exclude_years)?;
    let years = rectangular_years(&sample, panel.n_regions())?;
    let (n, t) = (panel.n_regions(), years.len());

    let demean = |v: &[f64]| match (spec.region_effects, spec.time_effects) {
        (true, true) => demean_twoway_values(v, n, t),
        (true, false) => demean_region_values(v, n, t),
        (false, true) => demean_year_values(v, n, t),
        (false, false) => unreachable!(),
    };
    let absorbed = match (spec.region_effects, spec.time_effects) {
        (true, true) => n + t - 1,
        (true, false) => n,
        _ => t,
    };

    let y_dm = demean(&sample.y);
    let mut x_dm = Vec::with_capacity(terms.len());
    for (name, col) in sample.names.iter().zip(&sample.x) {
        let d = demean(col);
        let raw = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let within = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if raw == 0.0 || within <= WITHIN_TOL * raw {
            return Err(Error::NoWithinVariation(name.clone()));
        }
        x_dm.push(d);
    }

    let rows = sample.len();
    let x = DMatrix::from_fn(rows, x_dm.len(), |i, j| x_dm[j][i]);
    let y = DVector::from_vec(y_dm.clone());
    let ls = least_squares(&x, &y, &sample.names)?;
    let resid = &y - &x * &ls.coefficients;
    let vcov = sandwich(&ls.xtx_inv, &x, &resid, &sample.clusters(), absorbed)?;

    let rss = resid.norm_squared();
    let tss = y.norm_squared();
    let within_r2 = (tss > 0.0).then(|| 1.0 - rss / tss);

    let mut residuals = ResidualPanel::new(panel.regions().to_vec(), panel.years().to_vec());
    for (row, &(i, s)) in sample.rows.iter().enumerate() {
        residuals.set(i, s, resid[row]);
    }

    Ok(FitResult {
        estimator: tag,
        response: spec.response.clone(),
        coefficients: coefficient_table(&sample.names, &ls.coefficients, &vcov),
        vcov: matrix_rows(&vcov),
        n_obs: rows,
        n_clusters: sample.n_clusters(),
        within_r2,
        rss,
        tss_within: Some(tss),
        notes: Vec::new(),
        gmm: None,
        residuals,
        within_sample: Some(WithinSample {
            rows: sample.rows.clone(),
            response: y_dm,
            regressor_names: sample.names.clone(),
            regressors: x_dm,
        }),
        gmm_state: None,
    })
}

/// The sample must cover the same years in every region for the closed-form
/// demeaning to be exact; returns those year indices.
fn rectangular_years(sample: &Sample, n_regions: usize) -> Result<Vec<usize>> {
    let mut per_region: Vec<Vec<usize>> = vec![Vec::new(); n_regions];
    for &(i, s) in &sample.rows {
        per_region[i].push(s);
    }
    let first = per_region[0].clone();
    if first.is_empty() || per_region.iter().any(|ys| *ys != first) {
        return Err(Error::InsufficientData(
            "estimation sample is unbalanced after transforms; within estimation requires a rectangular sample".into(),
        ));
    }
    Ok(first)
}

/// Dynamic within fit augmented with `main × moderator`.
#[derive(Debug, Clone, Serialize)]
pub struct HeterogeneousFit {
    pub fit: FitResult,
    pub main: String,
    /// `None` when the interaction was dropped as collinear.
    pub interaction: Option<String>,
}

impl HeterogeneousFit {
    /// `β₁ + β₂ z`.
    pub fn elasticity_at(&self, z: f64) -> Result<f64> {
        let b1 = self.fit.estimate(&self.main)?;
        let b2 = match &self.interaction {
            Some(name) => self.fit.estimate(name)?,
            None => 0.0,
        };
        Ok(b1 + b2 * z)
    }

    pub fn regime_elasticities(&self, zs: &[f64]) -> Result<Vec<(f64, f64)>> {
        zs.iter().map(|&z| self.elasticity_at(z).map(|e| (z, e))).collect()
    }
}

/// Adds `ℓ_it × Z_i` to the dynamic specification, where `ℓ` is the first
/// regressor and `Z` is constant within each region.
///
/// A moderator that is also constant across regions makes the interaction a
/// rescaled copy of `ℓ`; it is dropped with a [`FitNote::DroppedRegressor`].
pub fn fit_heterogeneous(panel: &Panel, spec: &RegressionSpec, moderator: &str) -> Result<HeterogeneousFit> {
    if !is_region_constant(panel, moderator)? {
        return Err(Error::InvalidSpec(format!("moderator `{moderator}` varies within a region")));
    }
    let main = match spec.regressors.first() {
        Some(Term::Var(v)) => v.clone(),
        _ => return Err(Error::InvalidSpec("first regressor must be a plain variable to interact".into())),
    };
    let values = panel.variable(moderator)?;
    let constant_overall = values.iter().all(|&v| v == values[0]);
    let term = Term::interact(main.clone(), moderator);

    if constant_overall {
        let mut fit = fit_dynamic_lsdv(panel, spec)?;
        let reason = format!("moderator `{moderator}` is constant across all regions");
        log::warn!("dropping `{term}`: {reason}");
        fit.notes.push(FitNote::DroppedRegressor { name: term.name(), reason });
        return Ok(HeterogeneousFit { fit, main, interaction: None });
    }

    let mut augmented = spec.clone();
    augmented.regressors.push(term.clone());
    let fit = fit_dynamic_lsdv(panel, &augmented)?;
    Ok(HeterogeneousFit { fit, main, interaction: Some(term.name()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::fit_pooled_ols;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn make_panel(n: usize, t: usize, vars: Vec<(&str, Vec<f64>)>) -> Panel {
        let map: BTreeMap<String, Vec<f64>> = vars.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        Panel::new((0..n).map(|i| format!("r{i}")).collect(), (2001..2001 + t as i32).collect(), map).unwrap()
    }

    #[test]
    fn exact_construction_recovers_beta() {
        let (n, t) = (4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let l: Vec<f64> = (0..n * t).map(|_| rng.random_range(0.0..3.0)).collect();
        let e: Vec<f64> = (0..n * t).map(|k| alpha[k / t] + 2.0 * l[k]).collect();
        let p = make_panel(n, t, vec![("l", l), ("e", e)]);
        let fit = fit_twoway_fe(&p, &RegressionSpec::twoway("e", vec![Term::var("l")])).unwrap();
        assert!((fit.estimate("l").unwrap() - 2.0).abs() < 1e-12);
        assert!((fit.within_r2.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn region_constant_regressor_has_no_within_variation() {
        let (n, t) = (3, 4);
        let l: Vec<f64> = (0..n * t).map(|k| (k / t) as f64).collect();
        let e: Vec<f64> = (0..n * t).map(|k| k as f64).collect();
        let p = make_panel(n, t, vec![("l", l), ("e", e)]);
        let err = fit_twoway_fe(&p, &RegressionSpec::twoway("e", vec![Term::var("l")])).unwrap_err();
        assert!(matches!(err, Error::NoWithinVariation(ref v) if v == "l"), "{err}");
    }

    #[test]
    fn random_panel_matches_dummy_ols() {
        let (n, t) = (6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l: Vec<f64> = (0..n * t).map(|_| rng.random_range(0.0..3.0)).collect();
        let e: Vec<f64> = l.iter().map(|v| 1.3 * v + rng.random_range(-1.0..1.0)).collect();
        let p = make_panel(n, t, vec![("l", l), ("e", e)]);
        let fe = fit_twoway_fe(&p, &RegressionSpec::twoway("e", vec![Term::var("l")])).unwrap();
        let mut dummy = RegressionSpec::twoway("e", vec![Term::var("l")]);
        dummy.intercept = true;
        let ols = fit_pooled_ols(&p, &dummy).unwrap();
        assert!((fe.estimate("l").unwrap() - ols.estimate("l").unwrap()).abs() < 1e-10);
        // Same residuals and the same small-sample factor, so identical clustered SEs.
        assert!((fe.std_error("l").unwrap() - ols.std_error("l").unwrap()).abs() < 1e-10);
    }

    #[test]
    fn dynamic_noise_free_without_dynamics() {
        let (n, t) = (5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l: Vec<f64> = (0..n * t).map(|_| rng.random_range(0.0..3.0)).collect();
        let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f64> = (0..n * t).map(|k| alpha[k / t] + l[k]).collect();
        let p = make_panel(n, t, vec![("l", l), ("e", e)]);
        let fit = fit_dynamic_lsdv(&p, &RegressionSpec::twoway("e", vec![Term::var("l")])).unwrap();
        assert!(fit.estimate("L1.e").unwrap().abs() < 1e-8);
        assert!((fit.estimate("l").unwrap() - 1.0).abs() < 1e-8);
        assert_eq!(fit.n_obs, n * (t - 1));
        assert!(fit.has_note(|n| matches!(n, FitNote::NickellBias { .. })));
    }

    #[test]
    fn dynamic_requires_three_periods() {
        let p = make_panel(3, 2, vec![("l", vec![1.0; 6]), ("e", vec![1.0; 6])]);
        assert!(matches!(
            fit_dynamic_lsdv(&p, &RegressionSpec::twoway("e", vec![Term::var("l")])),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn log_scale_equivariance() {
        let (n, t) = (5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let levels: Vec<f64> = (0..n * t).map(|_| rng.random_range(1.0..100.0)).collect();
        let e: Vec<f64> = levels.iter().map(|v| 0.8 * v.ln() + rng.random_range(-0.3..0.3)).collect();
        let l: Vec<f64> = levels.iter().map(|v| v.ln()).collect();
        let l_scaled: Vec<f64> = levels.iter().map(|v| (7.5 * v).ln()).collect();
        let p = make_panel(n, t, vec![("l", l), ("ls", l_scaled), ("e", e)]);
        let a = fit_twoway_fe(&p, &RegressionSpec::twoway("e", vec![Term::var("l")])).unwrap();
        let b = fit_twoway_fe(&p, &RegressionSpec::twoway("e", vec![Term::var("ls")])).unwrap();
        assert!((a.estimate("l").unwrap() - b.estimate("ls").unwrap()).abs() < 1e-10);
    }

    #[test]
    fn heterogeneous_exact_recovery_and_zero_moderator() {
        let (n, t) = (8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let l: Vec<f64> = (0..n * t).map(|_| rng.random_range(0.0..2.0)).collect();
        let z: Vec<f64> = (0..n * t).map(|k| if (k / t) % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut e = vec![0.0; n * t];
        for i in 0..n {
            for s in 0..t {
                let k = i * t + s;
                let prev = if s == 0 { 0.0 } else { e[k - 1] };
                e[k] = alpha[i] + 0.2 * prev + (1.0 + 0.5 * z[k]) * l[k];
            }
        }
        let p = make_panel(n, t, vec![("l", l), ("Z", z), ("zero", vec![0.0; n * t]), ("e", e)]);
        let spec = RegressionSpec::twoway("e", vec![Term::var("l")]);
        let h = fit_heterogeneous(&p, &spec, "Z").unwrap();
        assert!((h.fit.estimate("l").unwrap() - 1.0).abs() < 1e-8);
        assert!((h.fit.estimate("l:Z").unwrap() - 0.5).abs() < 1e-8);
        assert!((h.elasticity_at(1.0).unwrap() - 1.5).abs() < 1e-8);

        let dropped = fit_heterogeneous(&p, &spec, "zero").unwrap();
        assert!(dropped.interaction.is_none());
        let plain = fit_dynamic_lsdv(&p, &spec).unwrap();
        assert_eq!(dropped.fit.estimate("l").unwrap(), plain.estimate("l").unwrap());
        assert!(dropped.fit.has_note(|n| matches!(n, FitNote::DroppedRegressor { .. })));

        assert!(fit_heterogeneous(&p, &spec, "l").is_err());
    }

    #[test]
    fn vcov_is_symmetric_psd() {
        let (n, t) = (10, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a: Vec<f64> = (0..n * t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n * t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f64> = (0..n * t).map(|k| a[k] - b[k] + rng.random_range(-1.0..1.0)).collect();
        let p = make_panel(n, t, vec![("a", a), ("b", b), ("e", e)]);
        let fit = fit_twoway_fe(&p, &RegressionSpec::twoway("e", vec![Term::var("a"), Term::var("b")])).unwrap();
        let v = DMatrix::from_fn(2, 2, |i, j| fit.vcov[i][j]);
        assert!((&v - v.transpose()).abs().max() < 1e-12);
        assert!(v.symmetric_eigenvalues().iter().all(|&l| l > -1e-10));
    }
}
