use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Grid, Panel};

/// A right-hand-side term built from panel variables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Var(String),
    Lag { var: String, k: usize },
    Interact(String, String),
}

impl Term {
    pub fn var(name: impl Into<String>) -> Self {
        Term::Var(name.into())
    }

    pub fn lag(name: impl Into<String>, k: usize) -> Self {
        Term::Lag { var: name.into(), k }
    }

    pub fn interact(a: impl Into<String>, b: impl Into<String>) -> Self {
        Term::Interact(a.into(), b.into())
    }

    pub fn name(&self) -> String {
        self.to_string()
    }

    /// Evaluates the term over the full panel; lags flag their leading years.
    pub fn grid(&self, panel: &Panel) -> Result<Grid> {
        match self {
            Term::Var(v) => panel.grid(v),
            Term::Lag { var, k } => panel.grid(var)?.lag(*k),
            Term::Interact(a, b) => Ok(panel.grid(a)?.product(&panel.grid(b)?)),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(v) => write!(f, "{v}"),
            Term::Lag { var, k } => write!(f, "L{k}.{var}"),
            Term::Interact(a, b) => write!(f, "{a}:{b}"),
        }
    }
}

impl FromStr for Term {
    type Err = Error;

    /// Parses `x`, `L2.x` or `x:z`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::InvalidSpec("empty term".into()));
        }
        if let Some((a, b)) = s.split_once(':') {
            return Ok(Term::interact(a.trim(), b.trim()));
        }
        if let Some(rest) = s.strip_prefix('L') {
            if let Some((k, var)) = rest.split_once('.') {
                if let Ok(k) = k.parse::<usize>() {
                    return Ok(Term::lag(var, k));
                }
            }
        }
        Ok(Term::var(s))
    }
}

/// Response, regressors and absorbed effects of a panel regression.
/// Standard errors are always clustered by region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub response: String,
    pub regressors: Vec<Term>,
    /// Pooled OLS only; within and GMM fits never carry a free constant.
    pub intercept: bool,
    pub region_effects: bool,
    pub time_effects: bool,
    /// Years whose observations are removed from the estimation sample.
    #[serde(default)]
    pub exclude_years: Vec<i32>,
}

impl RegressionSpec {
    /// Two-way effects specification: `response ~ regressors + α_i + γ_t`.
    pub fn twoway(response: impl Into<String>, regressors: Vec<Term>) -> Self {
        Self {
            response: response.into(),
            regressors,
            intercept: false,
            region_effects: true,
            time_effects: true,
            exclude_years: Vec::new(),
        }
    }

    pub fn pooled(response: impl Into<String>, regressors: Vec<Term>, intercept: bool) -> Self {
        Self {
            response: response.into(),
            regressors,
            intercept,
            region_effects: false,
            time_effects: false,
            exclude_years: Vec::new(),
        }
    }

    pub fn excluding_years(mut self, years: Vec<i32>) -> Self {
        self.exclude_years = years;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.regressors.is_empty() && !self.intercept {
            return Err(Error::InvalidSpec("at least one regressor or an intercept is required".into()));
        }
        if self.regressors.iter().any(|t| *t == Term::Var(self.response.clone())) {
            return Err(Error::InvalidSpec(format!("response `{}` appears among the regressors", self.response)));
        }
        let mut names: Vec<String> = self.regressors.iter().map(Term::name).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidSpec("duplicate regressor".into()));
        }
        Ok(())
    }

    pub(crate) fn lag_response_term(&self) -> Term {
        Term::lag(self.response.clone(), 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GmmSteps {
    One,
    Two,
}

/// Instrument layout and weighting for the difference and system GMM estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    /// Shortest lag of the response used as an instrument (at least 2).
    pub min_lag: usize,
    /// Longest lag; `None` uses every available lag.
    pub max_lag: Option<usize>,
    /// One column per lag distance instead of one per (lag, period).
    pub collapse: bool,
    pub steps: GmmSteps,
    pub level_equations: bool,
    /// Extra panel variables used as IV-style instruments in the differenced
    /// equations, entered undifferenced.
    #[serde(default)]
    pub extra_instruments: Vec<String>,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            min_lag: 2,
            max_lag: None,
            collapse: false,
            steps: GmmSteps::One,
            level_equations: false,
            extra_instruments: Vec::new(),
        }
    }
}

impl GmmOptions {
    pub fn validate(&self) -> Result<()> {
        if self.min_lag < 2 {
            return Err(Error::InvalidSpec(format!("min_lag must be at least 2, got {}", self.min_lag)));
        }
        if let Some(max) = self.max_lag {
            if max < self.min_lag {
                return Err(Error::InvalidSpec(format!("max_lag {max} is below min_lag {}", self.min_lag)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorTag {
    Pooled,
    Fe2w,
    LsdvDynamic,
    DiffGmm,
    SysGmm,
}

impl fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EstimatorTag::Pooled => "pooled",
            EstimatorTag::Fe2w => "fe2w",
            EstimatorTag::LsdvDynamic => "lsdv_dynamic",
            EstimatorTag::DiffGmm => "diff_gmm",
            EstimatorTag::SysGmm => "sys_gmm",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    /// Two-sided, standard normal reference.
    pub p_value: f64,
}

/// Caveats attached to a fit. None of these stop estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitNote {
    /// Within estimation with a lagged response is biased at small T.
    NickellBias { periods: usize },
    /// A GMM weighting matrix was singular and replaced by its pseudo-inverse.
    PseudoInverseWeight { step: u8 },
    TooManyInstruments { instruments: usize, regions: usize },
    /// Estimated persistence outside (-1, 1); reported unclamped.
    NonStationaryPersistence { rho: f64 },
    DroppedRegressor { name: String, reason: String },
    /// First-step residuals vanished, so the efficient re-weighting was skipped.
    ExactFit,
}

impl fmt::Display for FitNote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitNote::NickellBias { periods } => {
                write!(f, "lagged response under the within transform with T = {periods}: Nickell bias, persistence biased toward zero")
            }
            FitNote::PseudoInverseWeight { step } => write!(f, "step-{step} weighting matrix singular; pseudo-inverse used"),
            FitNote::TooManyInstruments { instruments, regions } => {
                write!(f, "too many instruments: {instruments} instruments for {regions} regions")
            }
            FitNote::NonStationaryPersistence { rho } => write!(f, "persistence {rho:.4} outside (-1, 1)"),
            FitNote::DroppedRegressor { name, reason } => write!(f, "dropped `{name}`: {reason}"),
            FitNote::ExactFit => f.write_str("first-step residuals are zero; one-step weighting retained"),
        }
    }
}

/// GMM bookkeeping reported alongside the coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSummary {
    pub n_instruments: usize,
    pub n_response_lag_instruments: usize,
    pub steps: GmmSteps,
    pub collapse: bool,
    pub level_equations: bool,
    pub min_lag: usize,
    pub max_lag: Option<usize>,
    /// Minimized efficient-weighting objective `g' S^- g`.
    pub hansen_statistic: f64,
    pub hansen_df: i64,
}

/// Residuals laid out on the panel grid; cells outside the estimation sample are `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidualPanel {
    pub regions: Vec<String>,
    pub years: Vec<i32>,
    pub cells: Vec<Option<f64>>,
}

impl ResidualPanel {
    pub fn new(regions: Vec<String>, years: Vec<i32>) -> Self {
        let cells = vec![None; regions.len() * years.len()];
        Self { regions, years, cells }
    }

    pub fn set(&mut self, region: usize, year_idx: usize, value: f64) {
        let t = self.years.len();
        self.cells[region * t + year_idx] = Some(value);
    }

    pub fn get(&self, region: usize, year_idx: usize) -> Option<f64> {
        self.cells[region * self.years.len() + year_idx]
    }

    /// Available residuals of one region in year order.
    pub fn region_series(&self, region: usize) -> Vec<f64> {
        let t = self.years.len();
        self.cells[region * t..(region + 1) * t].iter().flatten().copied().collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.cells.iter().flatten().copied().collect()
    }
}

/// The demeaned `(response, regressor)` columns actually used by a within fit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WithinSample {
    pub rows: Vec<(usize, usize)>,
    pub response: Vec<f64>,
    pub regressor_names: Vec<String>,
    /// Column-major: `regressors[j][row]`.
    pub regressors: Vec<Vec<f64>>,
}

/// Output of every estimator.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub estimator: EstimatorTag,
    pub response: String,
    pub coefficients: Vec<Coefficient>,
    /// Cluster-robust covariance in coefficient order.
    pub vcov: Vec<Vec<f64>>,
    pub n_obs: usize,
    pub n_clusters: usize,
    /// Present only for within-transformed fits.
    pub within_r2: Option<f64>,
    pub rss: f64,
    /// Total sum of squares of the demeaned response (within fits only).
    pub tss_within: Option<f64>,
    pub notes: Vec<FitNote>,
    pub gmm: Option<GmmSummary>,
    /// Levels residuals for OLS / within fits, differenced residuals for GMM.
    #[serde(skip)]
    pub residuals: ResidualPanel,
    #[serde(skip)]
    pub within_sample: Option<WithinSample>,
    #[serde(skip)]
    pub(crate) gmm_state: Option<std::sync::Arc<super::gmm::GmmState>>,
}

impl FitResult {
    /// Wraps externally supplied estimates, e.g. coefficients taken from a published table.
    pub fn from_estimates(estimator: EstimatorTag, response: &str, estimates: &[(&str, f64)], vcov: Vec<Vec<f64>>) -> Result<Self> {
        let k = estimates.len();
        if vcov.len() != k || vcov.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidSpec(format!("vcov must be {k}x{k}")));
        }
        let coefficients = estimates
            .iter()
            .enumerate()
            .map(|(j, (name, est))| super::coefficient(name, *est, vcov[j][j]))
            .collect();
        Ok(Self {
            estimator,
            response: response.to_string(),
            coefficients,
            vcov,
            n_obs: 0,
            n_clusters: 0,
            within_r2: None,
            rss: 0.0,
            tss_within: None,
            notes: Vec::new(),
            gmm: None,
            residuals: ResidualPanel::default(),
            within_sample: None,
            gmm_state: None,
        })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.coefficients.iter().position(|c| c.name == name)
    }

    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn estimate(&self, name: &str) -> Result<f64> {
        self.coefficient(name)
            .map(|c| c.estimate)
            .ok_or_else(|| Error::UnknownVariable(format!("coefficient `{name}`")))
    }

    pub fn std_error(&self, name: &str) -> Result<f64> {
        self.coefficient(name)
            .map(|c| c.std_error)
            .ok_or_else(|| Error::UnknownVariable(format!("coefficient `{name}`")))
    }

    pub fn has_note(&self, pred: impl Fn(&FitNote) -> bool) -> bool {
        self.notes.iter().any(pred)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn term_parse_and_display() {
        for s in ["l", "L1.e", "L3.x", "l:Z"] {
            assert_eq!(s.parse::<Term>().unwrap().to_string(), s);
        }
        assert_eq!("Lx".parse::<Term>().unwrap(), Term::var("Lx"));
        assert!("".parse::<Term>().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(RegressionSpec::twoway("e", vec![Term::var("e")]).validate().is_err());
        assert!(RegressionSpec::twoway("e", vec![]).validate().is_err());
        assert!(RegressionSpec::pooled("e", vec![], true).validate().is_ok());
        assert!(RegressionSpec::twoway("e", vec![Term::lag("e", 1)]).validate().is_ok());
    }

    #[test]
    fn gmm_options_validation() {
        assert!(GmmOptions { min_lag: 1, ..Default::default() }.validate().is_err());
        assert!(GmmOptions { min_lag: 3, max_lag: Some(2), ..Default::default() }.validate().is_err());
        assert!(GmmOptions::default().validate().is_ok());
    }
}
