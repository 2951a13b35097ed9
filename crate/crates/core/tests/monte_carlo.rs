//! Simulation checks of the estimators and diagnostics against known DGPs.

use carbonpanel::dgp::{
    monte_carlo, monte_carlo_with, normal_draws, replication_rng, simulate_dynamic_panel, DgpConfig, ErrorLaw,
    EstimatorChoice, ModeratorConfig, RepMeasure, Target, LAG_RESPONSE, MODERATOR, REGRESSOR, RESPONSE,
};
use carbonpanel::diagnostics::{chi_square_p_value, durbin_watson, durbin_watson_fit, jarque_bera};
use carbonpanel::estimators::{fit_diff_gmm, fit_heterogeneous, fit_twoway_fe};
use carbonpanel::{GmmOptions, RegressionSpec, Term};

fn diff_gmm() -> EstimatorChoice {
    EstimatorChoice::DiffGmm { options: GmmOptions::default() }
}

#[test]
fn nickell_bias_and_diff_gmm_correction() {
    let cfg = DgpConfig { seed: 11, ..DgpConfig::nickell_demo() };
    let lsdv = monte_carlo(&cfg, &EstimatorChoice::Lsdv, 200).unwrap();
    let gmm = monte_carlo(&cfg, &diff_gmm(), 200).unwrap();
    let rho_lsdv = lsdv.summary(LAG_RESPONSE).unwrap().mean;
    let rho_gmm = gmm.summary(LAG_RESPONSE).unwrap().mean;
    assert_eq!((lsdv.failures, gmm.failures), (0, 0));
    assert!(rho_lsdv < 0.45, "LSDV mean rho {rho_lsdv}");
    assert!((rho_gmm - 0.5).abs() <= 0.05, "diff GMM mean rho {rho_gmm}");
}

#[test]
fn diff_gmm_recovers_both_parameters() {
    let cfg = DgpConfig { n_regions: 500, n_years: 10, rho: 0.5, beta: 1.0, sigma_u: 1.0, seed: 5, ..DgpConfig::default() };
    let study = monte_carlo(&cfg, &diff_gmm(), 200).unwrap();
    for (name, truth) in [(LAG_RESPONSE, 0.5), (REGRESSOR, 1.0)] {
        let mean = study.summary(name).unwrap().mean;
        assert!((mean - truth).abs() <= 0.05, "{name}: {mean}");
    }
}

#[test]
fn diff_gmm_rmse_falls_with_n() {
    let rmse = |n| {
        let cfg = DgpConfig { n_regions: n, n_years: 6, seed: 21, ..DgpConfig::default() };
        monte_carlo(&cfg, &diff_gmm(), 100).unwrap().summary(LAG_RESPONSE).unwrap().rmse
    };
    let r: Vec<f64> = [100, 200, 400, 800].into_iter().map(rmse).collect();
    assert!(r.windows(2).all(|w| w[1] < w[0]), "{r:?}");
}

#[test]
fn system_gmm_beats_difference_gmm_near_unit_root() {
    let cfg = DgpConfig { n_regions: 500, n_years: 8, rho: 0.9, seed: 17, ..DgpConfig::default() };
    let diff = monte_carlo(&cfg, &diff_gmm(), 100).unwrap();
    let sys = monte_carlo(&cfg, &EstimatorChoice::SysGmm { options: GmmOptions::default() }, 100).unwrap();
    let (bd, bs) = (diff.summary(LAG_RESPONSE).unwrap().bias, sys.summary(LAG_RESPONSE).unwrap().bias);
    assert!(bs.abs() < bd.abs(), "sys bias {bs}, diff bias {bd}");
}

#[test]
fn serial_correlation_and_hansen_calibration() {
    let cfg = DgpConfig { n_regions: 500, n_years: 7, seed: 31, ..DgpConfig::default() };
    let study = monte_carlo(&cfg, &diff_gmm(), 200).unwrap();
    let ar1 = study.rejection_rate("ar1_p", 0.05).unwrap();
    let ar2 = study.rejection_rate("ar2_p", 0.05).unwrap();
    let hansen = study.rejection_rate("hansen_p", 0.05).unwrap();
    assert!(ar1 > 0.90, "AR(1) rejection {ar1}");
    assert!((0.02..=0.09).contains(&ar2), "AR(2) rejection {ar2}");
    assert!((0.02..=0.10).contains(&hansen), "Hansen rejection {hansen}");
}

#[test]
fn hansen_detects_invalid_instrument() {
    let cfg = DgpConfig { n_regions: 500, n_years: 7, seed: 37, ..DgpConfig::default() };
    let targets = [Target::new(LAG_RESPONSE, cfg.rho)];
    let study = monte_carlo_with(&cfg, "invalid", &targets, 100, |sim| {
        let mut rng = replication_rng(999, sim.truth.u[0].to_bits());
        let noise = normal_draws(&mut rng, sim.truth.u.len(), 0.5)?;
        let bad: Vec<f64> = sim.truth.u.iter().zip(&noise).map(|(u, v)| u + v).collect();
        let panel = sim.panel.with_variable("w", bad)?;
        let opts = GmmOptions { extra_instruments: vec!["w".into()], ..GmmOptions::default() };
        let fit = fit_diff_gmm(&panel, &RegressionSpec::twoway(RESPONSE, vec![Term::var(REGRESSOR)]), &opts)?;
        Ok(RepMeasure::from_fit(&fit))
    })
    .unwrap();
    let rate = study.rejection_rate("hansen_p", 0.05).unwrap();
    assert!(rate > 0.5, "rejection rate {rate}");
}

#[test]
fn fe_unbiased_with_nominal_coverage() {
    let cfg = DgpConfig { n_regions: 200, n_years: 23, rho: 0.0, seed: 41, ..DgpConfig::default() };
    let study = monte_carlo(&cfg, &EstimatorChoice::Fe2w, 200).unwrap();
    let s = study.summary(REGRESSOR).unwrap();
    assert!(s.bias.abs() < 0.01, "bias {}", s.bias);
    assert!((0.90..=0.98).contains(&s.coverage), "coverage {}", s.coverage);
}

#[test]
fn pooled_ols_biased_when_regressor_tracks_alpha() {
    use carbonpanel::dgp::RegressorProcess;
    let cfg = DgpConfig {
        rho: 0.0,
        regressor_process: RegressorProcess::CorrelatedWithAlpha { kappa: 1.0 },
        seed: 43,
        ..DgpConfig::default()
    };
    let pooled = monte_carlo(&cfg, &EstimatorChoice::Pooled, 20).unwrap();
    let fe = monte_carlo(&cfg, &EstimatorChoice::Fe2w, 20).unwrap();
    assert!(pooled.summary(REGRESSOR).unwrap().bias > 0.2);
    assert!(fe.summary(REGRESSOR).unwrap().bias.abs() < 0.02);
}

#[test]
fn stationary_ar1_moments() {
    let cfg = DgpConfig {
        n_regions: 5000,
        n_years: 20,
        rho: 0.5,
        beta: 1.0,
        sigma_alpha: 0.0,
        sigma_gamma: 0.0,
        sigma_u: 1.0,
        regressor_sd: 0.0,
        seed: 47,
        ..DgpConfig::default()
    };
    let sim = simulate_dynamic_panel(&cfg).unwrap();
    let e = sim.panel.variable(RESPONSE).unwrap();
    let n = e.len() as f64;
    let mean = e.iter().sum::<f64>() / n;
    let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let target = 1.0 / (1.0 - 0.25);
    assert!((var / target - 1.0).abs() < 0.05, "variance {var} vs {target}");

    let t = cfg.n_years;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..cfg.n_regions {
        for s in 1..t {
            num += (e[i * t + s] - mean) * (e[i * t + s - 1] - mean);
        }
    }
    for v in e {
        den += (v - mean).powi(2);
    }
    let acf = num / den * n / (n - cfg.n_regions as f64);
    assert!((acf - 0.5).abs() < 0.02, "lag-1 autocorrelation {acf}");
}

#[test]
fn durbin_watson_near_two_for_white_noise() {
    let mut rng = replication_rng(53, 0);
    let series: Vec<Vec<f64>> = (0..500).map(|_| normal_draws(&mut rng, 20, 1.0).unwrap()).collect();
    let dw = durbin_watson(&series).unwrap();
    assert!((1.8..=2.2).contains(&dw), "{dw}");
}

#[test]
fn fe_residual_durbin_watson_is_sensible() {
    let cfg = DgpConfig { rho: 0.0, seed: 59, ..DgpConfig::default() };
    let sim = simulate_dynamic_panel(&cfg).unwrap();
    let fit = fit_twoway_fe(&sim.panel, &RegressionSpec::twoway(RESPONSE, vec![Term::var(REGRESSOR)])).unwrap();
    let dw = durbin_watson_fit(&fit).unwrap();
    assert!((1.8..=2.4).contains(&dw), "{dw}");
}

#[test]
fn jarque_bera_flags_heavy_tails() {
    let cfg = DgpConfig {
        n_regions: 300,
        rho: 0.0,
        error_law: ErrorLaw::HeavyTail { tail_index: 3.0 },
        seed: 61,
        ..DgpConfig::default()
    };
    let sim = simulate_dynamic_panel(&cfg).unwrap();
    let fit = fit_twoway_fe(&sim.panel, &RegressionSpec::twoway(RESPONSE, vec![Term::var(REGRESSOR)])).unwrap();
    let resid = fit.residuals.values();
    assert!(resid.len() >= 5000);
    assert!(jarque_bera(&resid).unwrap().p_value < 0.001);
}

#[test]
fn jarque_bera_size_under_normality() {
    let rejections = (0..200u64)
        .filter(|&r| {
            let x = normal_draws(&mut replication_rng(67, r), 10_000, 1.0).unwrap();
            jarque_bera(&x).unwrap().p_value < 0.05
        })
        .count();
    let rate = rejections as f64 / 200.0;
    assert!((0.02..=0.09).contains(&rate), "{rate}");
}

#[test]
fn within_r2_matches_calibration() {
    let cfg = DgpConfig { n_regions: 1000, n_years: 70, seed: 71, ..DgpConfig::desk_calibrated() };
    let sim = simulate_dynamic_panel(&cfg).unwrap();
    let fit = fit_twoway_fe(&sim.panel, &RegressionSpec::twoway(RESPONSE, vec![Term::var(REGRESSOR)])).unwrap();
    let r2 = fit.within_r2.unwrap();
    assert!((r2 - 0.85).abs() <= 0.03, "{r2}");
}

#[test]
fn regime_dependent_elasticity_recovered() {
    let cfg = DgpConfig {
        rho: 0.0,
        beta: 1.0,
        moderator: Some(ModeratorConfig { share: 0.4, beta_interaction: 0.5 }),
        seed: 73,
        ..DgpConfig::default()
    };
    let targets = [Target::new(REGRESSOR, 1.0), Target::new(format!("{REGRESSOR}:{MODERATOR}"), 0.5)];
    let study = monte_carlo_with(&cfg, "heterogeneous", &targets, 50, |sim| {
        let het = fit_heterogeneous(&sim.panel, &RegressionSpec::twoway(RESPONSE, vec![Term::var(REGRESSOR)]), MODERATOR)?;
        Ok(RepMeasure::from_fit(&het.fit))
    })
    .unwrap();
    for s in &study.summaries {
        assert!(s.bias.abs() <= 0.05, "{}: bias {}", s.name, s.bias);
    }
}

#[test]
fn chi_square_tail_reference() {
    // P(χ²₄ > x) = e^{-x/2}(1 + x/2)
    let x = 7.3;
    assert!((chi_square_p_value(x, 4) - (-x / 2.0f64).exp() * (1.0 + x / 2.0)).abs() < 1e-12);
}

#[test]
fn system_gmm_hansen_size() {
    let cfg = DgpConfig { n_regions: 500, n_years: 7, seed: 79, ..DgpConfig::default() };
    let study = monte_carlo(&cfg, &EstimatorChoice::SysGmm { options: GmmOptions::default() }, 200).unwrap();
    let hansen = study.rejection_rate("hansen_p", 0.05).unwrap();
    let ar2 = study.rejection_rate("ar2_p", 0.05).unwrap();
    assert!((0.02..=0.10).contains(&hansen), "Hansen rejection {hansen}");
    assert!((0.02..=0.09).contains(&ar2), "AR(2) rejection {ar2}");
}
