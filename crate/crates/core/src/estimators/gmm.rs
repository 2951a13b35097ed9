//! Arellano–Bond difference GMM and Blundell–Bond system GMM.
//!
//! The model is `e_it = α_i + γ_t + ρ e_{i,t-1} + β'x_it + u_it` with strictly
//! exogenous `x`. The differenced equations are instrumented by lagged levels
//! `e_{i,t-s}, s >= min_lag`; system GMM adds level equations instrumented by
//! `Δe_{i,t-min_lag+1}`. Exogenous regressors instrument themselves (in
//! differences). Difference GMM gets one indicator per differenced period.
//! System GMM shares `γ_t` across both blocks, so differenced rows carry
//! `γ_t - γ_{t-1}`; the level-block indicators are the instruments, plus a
//! differenced-block indicator only where the level block does not already
//! imply that moment.
//!
//! Missing instruments are zero-filled in the per-period block layout.
//! Weighting matrices are inverted with a pseudo-inverse, flagged when the
//! matrix was singular.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::types::{
    EstimatorTag, FitNote, FitResult, GmmOptions, GmmSteps, GmmSummary, RegressionSpec, ResidualPanel, Term,
};
use super::{coefficient_table, matrix_rows};
use crate::error::{Error, Result};
use crate::linalg::{inverse_spd, pinv_symmetric, symmetrize};
use crate::panel::{Grid, Panel};

/// One instrument column: the lag distance and, unless collapsed, the period it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentColumn {
    pub lag: usize,
    pub period: Option<i32>,
}

/// Lagged-level instruments for the differenced equations, one block per region.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentSet {
    /// Years of the differenced equations (third panel year onward).
    pub periods: Vec<i32>,
    pub columns: Vec<InstrumentColumn>,
    /// `periods.len() × columns.len()` per region, in panel region order.
    pub blocks: Vec<DMatrix<f64>>,
}

impl InstrumentSet {
    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }
}

/// Builds the `E[e_{i,t-s} Δu_it] = 0, s >= min_lag` instrument blocks.
pub fn build_ab_instruments(panel: &Panel, response: &str, options: &GmmOptions) -> Result<InstrumentSet> {
    options.validate()?;
    let (n, t) = (panel.n_regions(), panel.n_years());
    if t < 3 {
        return Err(Error::NoInstruments(format!("T = {t}: no differenced period has a lag of order >= 2")));
    }
    let e = panel.variable(response)?;
    let max_lag = |tau: usize| options.max_lag.map_or(tau, |m| m.min(tau));

    let taus: Vec<usize> = (2..t).collect();
    let mut columns = Vec::new();
    if options.collapse {
        for s in options.min_lag..=max_lag(t - 1) {
            columns.push(InstrumentColumn { lag: s, period: None });
        }
    } else {
        for &tau in &taus {
            for s in options.min_lag..=max_lag(tau) {
                columns.push(InstrumentColumn { lag: s, period: Some(panel.years()[tau]) });
            }
        }
    }
    if columns.is_empty() {
        return Err(Error::NoInstruments(format!(
            "T = {t} leaves no lag in [{}, {:?}]",
            options.min_lag, options.max_lag
        )));
    }

    let first = panel.first_year();
    let blocks = (0..n)
        .map(|i| {
            DMatrix::from_fn(taus.len(), columns.len(), |row, c| {
                let tau = taus[row];
                let col = &columns[c];
                let in_period = col.period.is_none_or(|p| (p - first) as usize == tau);
                if in_period && col.lag <= tau {
                    e[i * t + tau - col.lag]
                } else {
                    0.0
                }
            })
        })
        .collect();
    Ok(InstrumentSet { periods: taus.iter().map(|&tau| panel.years()[tau]).collect(), columns, blocks })
}

/// Per-region stacked equations.
#[derive(Debug, Clone)]
pub(crate) struct RegionBlock {
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
    pub h: DMatrix<f64>,
    /// Year index of each differenced-equation row; `None` marks level rows.
    pub diff_year: Vec<Option<usize>>,
}

/// Everything the serial-correlation test needs from a GMM fit.
#[derive(Debug, Clone)]
pub(crate) struct GmmState {
    pub blocks: Vec<RegionBlock>,
    pub residuals: Vec<DVector<f64>>,
    /// `Σ_i X_i'Z_i`.
    pub xz: DMatrix<f64>,
    pub weight: DMatrix<f64>,
    /// `(X'Z W Z'X)^-1`.
    pub bread: DMatrix<f64>,
    pub vcov: DMatrix<f64>,
}

pub fn fit_diff_gmm(panel: &Panel, spec: &RegressionSpec, options: &GmmOptions) -> Result<FitResult> {
    let opts = GmmOptions { level_equations: false, ..options.clone() };
    fit_gmm(panel, spec, &opts)
}

pub fn fit_sys_gmm(panel: &Panel, spec: &RegressionSpec, options: &GmmOptions) -> Result<FitResult> {
    let opts = GmmOptions { level_equations: true, ..options.clone() };
    fit_gmm(panel, spec, &opts)
}

/// Column kinds of the stacked regressor matrix.
enum XCol {
    LagResponse,
    Exog(usize),
    DiffYear(usize),
    /// System GMM year effect: `1[t = p]` in level rows, `1[t = p] - 1[t - 1 = p]` in differenced rows.
    Year(usize),
    LevelConst,
}

/// Column kinds of the stacked instrument matrix.
enum ZCol {
    ResponseLag(usize),
    LevelDiff { period: Option<usize> },
    ExogDiff(usize),
    ExogLevel(usize),
    DiffYear(usize),
    LevelYear(usize),
    LevelConst,
    Extra(usize),
}

/// Difference GMM, or system GMM when `options.level_equations` is set.
pub fn fit_gmm(panel: &Panel, spec: &RegressionSpec, options: &GmmOptions) -> Result<FitResult> {
    spec.validate()?;
    options.validate()?;
    let (n, t) = (panel.n_regions(), panel.n_years());
    if t < 3 {
        return Err(Error::InsufficientData(format!("GMM needs T >= 3, got {t}")));
    }
    for y in &spec.exclude_years {
        if panel.year_index(*y).is_none() {
            return Err(Error::InvalidSpec(format!("excluded year {y} is not in the panel")));
        }
    }
    let system = options.level_equations;
    let lag_term = spec.lag_response_term();
    let exog: Vec<Term> = spec.regressors.iter().filter(|term| **term != lag_term).cloned().collect();
    let exog_grids: Vec<Grid> = exog.iter().map(|term| term.grid(panel)).collect::<Result<_>>()?;
    let extra_grids: Vec<Grid> =
        options.extra_instruments.iter().map(|v| panel.grid(v)).collect::<Result<_>>()?;
    let e = panel.variable(&spec.response)?;
    let ab = build_ab_instruments(panel, &spec.response, options)?;
    let level_lag = options.min_lag - 1;

    let excluded = |tau: usize| spec.exclude_years.contains(&panel.years()[tau]);
    let exog_at = |i: usize, tau: usize| -> Option<Vec<f64>> { exog_grids.iter().map(|g| g.get(i, tau)).collect() };

    // Equation rows per region: (tau, is_level).
    let mut rows_per_region: Vec<Vec<(usize, bool)>> = vec![Vec::new(); n];
    for (i, rows) in rows_per_region.iter_mut().enumerate() {
        for tau in 2..t {
            if excluded(tau) {
                continue;
            }
            let extras_ok = extra_grids.iter().all(|g| g.is_available(i, tau));
            if extras_ok && exog_at(i, tau).is_some() && exog_at(i, tau - 1).is_some() {
                rows.push((tau, false));
            }
        }
        if system {
            for tau in 2..t {
                if !excluded(tau) && tau > level_lag && exog_at(i, tau).is_some() && exog_at(i, tau - 1).is_some() {
                    rows.push((tau, true));
                }
            }
        }
    }
    let diff_periods: Vec<usize> = distinct(rows_per_region.iter().flatten().filter(|r| !r.1).map(|r| r.0));
    let level_periods: Vec<usize> = distinct(rows_per_region.iter().flatten().filter(|r| r.1).map(|r| r.0));
    if diff_periods.is_empty() {
        return Err(Error::InsufficientData("no differenced equation survives the sample filters".into()));
    }

    // Regressor layout.
    let mut x_cols = vec![XCol::LagResponse];
    let mut x_names = vec![lag_term.name()];
    for (j, term) in exog.iter().enumerate() {
        x_cols.push(XCol::Exog(j));
        x_names.push(term.name());
    }
    // Differenced year indicators whose moment is not implied by two level-block indicators.
    let free_diff_periods: Vec<usize> = diff_periods
        .iter()
        .copied()
        .filter(|tau| !(system && level_periods.contains(tau) && level_periods.contains(&(tau - 1))))
        .collect();
    if spec.time_effects && system {
        let periods = distinct(level_periods.iter().copied().chain(diff_periods.iter().flat_map(|&tau| [tau - 1, tau])));
        for p in periods {
            x_cols.push(XCol::Year(p));
            x_names.push(format!("year[{}]", panel.years()[p]));
        }
    } else if spec.time_effects {
        for &tau in &diff_periods {
            x_cols.push(XCol::DiffYear(tau));
            x_names.push(format!("D.year[{}]", panel.years()[tau]));
        }
    } else if system {
        x_cols.push(XCol::LevelConst);
        x_names.push("_cons".into());
    }

    // Instrument layout.
    let mut z_cols: Vec<ZCol> = (0..ab.n_columns()).map(ZCol::ResponseLag).collect();
    if system {
        if options.collapse {
            z_cols.push(ZCol::LevelDiff { period: None });
        } else {
            z_cols.extend(level_periods.iter().map(|&tau| ZCol::LevelDiff { period: Some(tau) }));
        }
    }
    z_cols.extend((0..exog.len()).map(ZCol::ExogDiff));
    if system {
        z_cols.extend((0..exog.len()).map(ZCol::ExogLevel));
    }
    if spec.time_effects {
        z_cols.extend(free_diff_periods.iter().map(|&tau| ZCol::DiffYear(tau)));
        if system {
            z_cols.extend(level_periods.iter().map(|&tau| ZCol::LevelYear(tau)));
        }
    } else if system {
        z_cols.push(ZCol::LevelConst);
    }
    z_cols.extend((0..extra_grids.len()).map(ZCol::Extra));

    let mut blocks = Vec::with_capacity(n);
    for (i, rows) in rows_per_region.iter().enumerate() {
        let r = rows.len();
        let mut x = DMatrix::zeros(r, x_cols.len());
        let mut z = DMatrix::zeros(r, z_cols.len());
        let mut y = DVector::zeros(r);
        let mut diff_year = Vec::with_capacity(r);
        for (row, &(tau, level)) in rows.iter().enumerate() {
            let now = exog_at(i, tau).expect("row filtered on availability");
            let prev = exog_at(i, tau - 1).expect("row filtered on availability");
            let ev = |s: usize| e[i * t + s];
            y[row] = if level { ev(tau) } else { ev(tau) - ev(tau - 1) };
            diff_year.push((!level).then_some(tau));
            for (c, col) in x_cols.iter().enumerate() {
                x[(row, c)] = match *col {
                    XCol::LagResponse if level => ev(tau - 1),
                    XCol::LagResponse => ev(tau - 1) - ev(tau - 2),
                    XCol::Exog(j) if level => now[j],
                    XCol::Exog(j) => now[j] - prev[j],
                    XCol::DiffYear(p) => indicator(!level && p == tau),
                    XCol::Year(p) if level => indicator(p == tau),
                    XCol::Year(p) => indicator(p == tau) - indicator(p + 1 == tau),
                    XCol::LevelConst => indicator(level),
                };
            }
            for (c, col) in z_cols.iter().enumerate() {
                z[(row, c)] = match *col {
                    ZCol::ResponseLag(k) if !level => ab.blocks[i][(tau - 2, k)],
                    ZCol::ResponseLag(_) => 0.0,
                    ZCol::LevelDiff { period } if level && period.is_none_or(|p| p == tau) => {
                        ev(tau - level_lag) - ev(tau - level_lag - 1)
                    }
                    ZCol::LevelDiff { .. } => 0.0,
                    ZCol::ExogDiff(j) if !level => now[j] - prev[j],
                    ZCol::ExogLevel(j) if level => now[j] - prev[j],
                    ZCol::ExogDiff(_) | ZCol::ExogLevel(_) => 0.0,
                    ZCol::DiffYear(p) => indicator(!level && p == tau),
                    ZCol::LevelYear(p) => indicator(level && p == tau),
                    ZCol::LevelConst => indicator(level),
                    ZCol::Extra(k) if !level => extra_grids[k].get(i, tau).expect("row filtered on availability"),
                    ZCol::Extra(_) => 0.0,
                };
            }
        }
        let h = one_step_h(&diff_year);
        blocks.push(RegionBlock { x, z, y, h, diff_year });
    }

    // Columns that are zero for every region (e.g. a period removed by year exclusion) carry no moment.
    let keep: Vec<usize> = (0..z_cols.len())
        .filter(|&c| blocks.iter().any(|b| b.z.column(c).iter().any(|v| *v != 0.0)))
        .collect();
    let n_ab_kept = keep.iter().filter(|&&c| matches!(z_cols[c], ZCol::ResponseLag(_))).count();
    if keep.len() < z_cols.len() {
        for b in &mut blocks {
            b.z = b.z.select_columns(&keep);
        }
    }
    let (k, l) = (x_cols.len(), keep.len());
    if l < k {
        return Err(Error::NoInstruments(format!("{l} instruments for {k} coefficients: underidentified")));
    }

    let mut notes = Vec::new();
    if l >= n {
        log::warn!("too many instruments: {l} instruments for {n} regions");
        notes.push(FitNote::TooManyInstruments { instruments: l, regions: n });
    }

    let xz = blocks.iter().fold(DMatrix::zeros(k, l), |acc, b| acc + b.x.transpose() * &b.z);
    let zy = blocks.iter().fold(DVector::zeros(l), |acc, b| acc + b.z.transpose() * &b.y);
    let zhz = blocks.iter().fold(DMatrix::zeros(l, l), |acc, b| acc + b.z.transpose() * &b.h * &b.z);

    let (w1, deficient1) = pinv_symmetric(&zhz);
    if deficient1 {
        notes.push(FitNote::PseudoInverseWeight { step: 1 });
    }
    let (beta1, bread1) = gmm_solve(&xz, &w1, &zy, &x_names)?;
    let resid1 = residuals(&blocks, &beta1);
    let s1 = moment_outer(&blocks, &resid1);

    let y_scale: f64 = blocks.iter().map(|b| b.y.norm_squared()).sum::<f64>().max(f64::MIN_POSITIVE);
    let rss1: f64 = resid1.iter().map(|u| u.norm_squared()).sum();
    let exact = rss1 <= 1e-24 * y_scale;

    let (w2, beta2, bread2, resid2) = if exact {
        notes.push(FitNote::ExactFit);
        (w1.clone(), beta1.clone(), bread1.clone(), resid1.clone())
    } else {
        let (w2, deficient2) = pinv_symmetric(&s1);
        if deficient2 {
            notes.push(FitNote::PseudoInverseWeight { step: 2 });
        }
        let (beta2, bread2) = gmm_solve(&xz, &w2, &zy, &x_names)?;
        let resid2 = residuals(&blocks, &beta2);
        (w2, beta2, bread2, resid2)
    };

    let hansen_statistic = if exact {
        0.0
    } else {
        let g = moment_sum(&blocks, &resid2);
        (g.transpose() * &w2 * &g)[(0, 0)].max(0.0)
    };

    let (beta, bread, weight, resid) = match options.steps {
        GmmSteps::One => (beta1, bread1, w1, resid1),
        GmmSteps::Two => (beta2, bread2, w2, resid2),
    };
    let s_final = moment_outer(&blocks, &resid);
    let middle = &xz * &weight * &s_final * &weight * xz.transpose();
    let vcov = symmetrize(&(&bread * middle * &bread));

    let rho = beta[0];
    if rho.abs() >= 1.0 {
        notes.push(FitNote::NonStationaryPersistence { rho });
    }

    let mut residual_panel = ResidualPanel::new(panel.regions().to_vec(), panel.years().to_vec());
    let mut n_obs = 0;
    for (i, (b, u)) in blocks.iter().zip(&resid).enumerate() {
        for (row, dy) in b.diff_year.iter().enumerate() {
            if let Some(tau) = dy {
                residual_panel.set(i, *tau, u[row]);
                n_obs += 1;
            }
        }
    }
    let rss = resid.iter().map(|u| u.norm_squared()).sum();

    let summary = GmmSummary {
        n_instruments: l,
        n_response_lag_instruments: n_ab_kept,
        steps: options.steps,
        collapse: options.collapse,
        level_equations: system,
        min_lag: options.min_lag,
        max_lag: options.max_lag,
        hansen_statistic,
        hansen_df: l as i64 - k as i64,
    };
    let state = GmmState { blocks, residuals: resid, xz, weight, bread, vcov: vcov.clone() };

    Ok(FitResult {
        estimator: if system { EstimatorTag::SysGmm } else { EstimatorTag::DiffGmm },
        response: spec.response.clone(),
        coefficients: coefficient_table(&x_names, &beta, &vcov),
        vcov: matrix_rows(&vcov),
        n_obs,
        n_clusters: n,
        within_r2: None,
        rss,
        tss_within: None,
        notes,
        gmm: Some(summary),
        residuals: residual_panel,
        within_sample: None,
        gmm_state: Some(Arc::new(state)),
    })
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn distinct(it: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = it.collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Covariance pattern of `Δu` under i.i.d. `u`: 2 on the diagonal, -1 for
/// consecutive years. Level rows get the identity, with no cross terms.
fn one_step_h(diff_year: &[Option<usize>]) -> DMatrix<f64> {
    let r = diff_year.len();
    DMatrix::from_fn(r, r, |a, b| match (diff_year[a], diff_year[b]) {
        (Some(ta), Some(tb)) if ta == tb => 2.0,
        (Some(ta), Some(tb)) if ta.abs_diff(tb) == 1 => -1.0,
        (None, None) if a == b => 1.0,
        _ => 0.0,
    })
}

/// `β = (A W A')^-1 A W Z'y` with `A = X'Z`; also returns `(A W A')^-1`.
fn gmm_solve(
    xz: &DMatrix<f64>,
    w: &DMatrix<f64>,
    zy: &DVector<f64>,
    names: &[String],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let awa = xz * w * xz.transpose();
    let bread = inverse_spd(&awa).map_err(|_| {
        Error::Numerical(format!("GMM normal matrix is singular; coefficients {} not identified", names.join(", ")))
    })?;
    let beta = &bread * (xz * w * zy);
    Ok((beta, bread))
}

fn residuals(blocks: &[RegionBlock], beta: &DVector<f64>) -> Vec<DVector<f64>> {
    blocks.iter().map(|b| &b.y - &b.x * beta).collect()
}

fn moment_sum(blocks: &[RegionBlock], resid: &[DVector<f64>]) -> DVector<f64> {
    let l = blocks[0].z.ncols();
    blocks.iter().zip(resid).fold(DVector::zeros(l), |acc, (b, u)| acc + b.z.transpose() * u)
}

/// `Σ_i Z_i'u_i u_i'Z_i`, reduced in region order.
fn moment_outer(blocks: &[RegionBlock], resid: &[DVector<f64>]) -> DMatrix<f64> {
    let l = blocks[0].z.ncols();
    blocks.iter().zip(resid).fold(DMatrix::zeros(l, l), |acc, (b, u)| {
        let g = b.z.transpose() * u;
        acc + &g * g.transpose()
    })
}
