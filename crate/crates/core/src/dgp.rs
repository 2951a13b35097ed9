//! Simulated dynamic panels and pixel disturbance grids with known
//! parameters, and a deterministic Monte Carlo harness.
//!
//! Every random draw comes from a ChaCha8 stream. Replication `r` of a study
//! seeded with `s` uses stream `r` of the generator keyed by `s`, so its data
//! do not depend on which other replications ran or on the thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Pareto, Poisson, StandardNormal, StudentT, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics;
use crate::error::{Error, Result};
use crate::estimators::{
    fit_diff_gmm, fit_dynamic_lsdv, fit_pooled_ols, fit_sys_gmm, fit_twoway_fe, FitResult, GmmOptions, RegressionSpec,
    Term,
};
use crate::ingest::{Pixel, PixelGrid};
use crate::panel::Panel;

pub const RESPONSE: &str = "e";
pub const REGRESSOR: &str = "l";
pub const MODERATOR: &str = "Z";
pub const LAG_RESPONSE: &str = "L1.e";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegressorProcess {
    IidNormal,
    Ar1 { phi: f64 },
    /// `ℓ_it = κ α_i + v_it`.
    CorrelatedWithAlpha { kappa: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorLaw {
    Normal,
    /// Student-t with `tail_index` degrees of freedom, rescaled to unit
    /// variance when the variance exists.
    HeavyTail { tail_index: f64 },
}

/// Region-constant binary moderator `Z_i ~ Bernoulli(share)` entering as `β_Z ℓ_it Z_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeratorConfig {
    pub share: f64,
    pub beta_interaction: f64,
}

/// `e_it = α_i + γ_t + ρ e_{i,t-1} + β ℓ_it + u_it`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    #[serde(alias = "N")]
    pub n_regions: usize,
    #[serde(alias = "T")]
    pub n_years: usize,
    pub first_year: i32,
    pub rho: f64,
    pub beta: f64,
    pub sigma_alpha: f64,
    pub sigma_gamma: f64,
    pub sigma_u: f64,
    /// Innovation standard deviation of the regressor; 0 gives `ℓ ≡ κ α_i` (or `ℓ ≡ 0`).
    pub regressor_sd: f64,
    pub regressor_process: RegressorProcess,
    pub error_law: ErrorLaw,
    pub burn_in: usize,
    pub seed: u64,
    pub moderator: Option<ModeratorConfig>,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n_regions: 200,
            n_years: 23,
            first_year: 2001,
            rho: 0.5,
            beta: 1.0,
            sigma_alpha: 1.0,
            sigma_gamma: 0.5,
            sigma_u: 1.0,
            regressor_sd: 1.0,
            regressor_process: RegressorProcess::IidNormal,
            error_law: ErrorLaw::Normal,
            burn_in: 50,
            seed: 0,
            moderator: None,
        }
    }
}

impl DgpConfig {
    /// Short panel with moderate persistence, where LSDV is visibly biased.
    pub fn nickell_demo() -> Self {
        Self { n_regions: 500, n_years: 6, rho: 0.5, beta: 1.0, ..Self::default() }
    }

    /// County-scale panel with near-zero persistence and the error variance
    /// set for a population within R² of 0.85.
    pub fn desk_calibrated() -> Self {
        let (rho, beta) = (-0.01, 1.32);
        let sigma_u = calibrate_sigma_u(rho, beta, 1.0, 0.85).expect("valid calibration");
        Self { n_regions: 200, n_years: 23, rho, beta, sigma_u, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_regions == 0 || self.n_years == 0 {
            return bad("region and year counts must be positive".into());
        }
        if !(self.rho.abs() < 1.0) {
            return bad(format!("|rho| must be < 1, got {}", self.rho));
        }
        if !self.beta.is_finite() {
            return bad("beta must be finite".into());
        }
        for (name, v) in [
            ("sigma_alpha", self.sigma_alpha),
            ("sigma_gamma", self.sigma_gamma),
            ("sigma_u", self.sigma_u),
            ("regressor_sd", self.regressor_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a nonnegative finite number, got {v}"));
            }
        }
        if self.burn_in < 50 {
            return bad(format!("burn_in must be at least 50, got {}", self.burn_in));
        }
        match self.regressor_process {
            RegressorProcess::Ar1 { phi } if !(phi.abs() < 1.0) => return bad(format!("|phi| must be < 1, got {phi}")),
            RegressorProcess::CorrelatedWithAlpha { kappa } if !kappa.is_finite() => {
                return bad("kappa must be finite".into())
            }
            _ => {}
        }
        if let ErrorLaw::HeavyTail { tail_index } = self.error_law {
            if !(tail_index > 0.0 && tail_index.is_finite()) {
                return bad(format!("tail_index must be positive, got {tail_index}"));
            }
        }
        if let Some(m) = self.moderator {
            if !(0.0..=1.0).contains(&m.share) || !m.beta_interaction.is_finite() {
                return bad("moderator share must lie in [0, 1] with a finite interaction".into());
            }
        }
        Ok(())
    }

    pub fn years(&self) -> Vec<i32> {
        (0..self.n_years as i32).map(|s| self.first_year + s).collect()
    }
}

/// `σ_u` giving population within R² `r2` for an iid regressor with standard
/// deviation `sd_l`: `σ_u² = (1 − R²) β² σ_ℓ² / (R² − ρ²)`.
pub fn calibrate_sigma_u(rho: f64, beta: f64, sd_l: f64, r2: f64) -> Result<f64> {
    if !(r2 > rho * rho && r2 < 1.0) {
        return Err(Error::InvalidConfig(format!("target R² {r2} must lie in (ρ², 1)")));
    }
    Ok(((1.0 - r2) * beta * beta * sd_l * sd_l / (r2 - rho * rho)).sqrt())
}

/// Exact draws behind a simulated panel. Vectors over cells are region-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpTruth {
    pub rho: f64,
    pub beta: f64,
    pub beta_interaction: Option<f64>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    /// Variables `e`, `l`, and `Z` when a moderator is configured.
    pub panel: Panel,
    pub truth: DgpTruth,
}

pub fn simulate_dynamic_panel(config: &DgpConfig) -> Result<SimulatedPanel> {
    simulate_with_rng(config, &mut ChaCha8Rng::seed_from_u64(config.seed))
}

/// Generator for replication `rep` of a study seeded with `seed`.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

fn normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sd * z
}

pub fn simulate_with_rng(config: &DgpConfig, rng: &mut ChaCha8Rng) -> Result<SimulatedPanel> {
    config.validate()?;
    let (n, t, burn) = (config.n_regions, config.n_years, config.burn_in);
    let heavy = match config.error_law {
        ErrorLaw::Normal => None,
        ErrorLaw::HeavyTail { tail_index } => {
            let dist = StudentT::new(tail_index).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let scale = if tail_index > 2.0 { ((tail_index - 2.0) / tail_index).sqrt() } else { 1.0 };
            Some((dist, scale))
        }
    };

    let alpha: Vec<f64> = (0..n).map(|_| normal(rng, config.sigma_alpha)).collect();
    let gamma: Vec<f64> = (0..t).map(|_| normal(rng, config.sigma_gamma)).collect();
    let z: Vec<f64> = match config.moderator {
        Some(m) => (0..n).map(|_| if rng.random::<f64>() < m.share { 1.0 } else { 0.0 }).collect(),
        None => vec![0.0; n],
    };
    let beta_z = config.moderator.map_or(0.0, |m| m.beta_interaction);

    let mut e = vec![0.0; n * t];
    let mut l = vec![0.0; n * t];
    let mut u = vec![0.0; n * t];
    for i in 0..n {
        let mut e_prev = 0.0;
        let mut l_prev = 0.0;
        for step in 0..burn + t {
            let v = normal(rng, config.regressor_sd);
            let l_it = match config.regressor_process {
                RegressorProcess::IidNormal => v,
                RegressorProcess::Ar1 { phi } => phi * l_prev + v,
                RegressorProcess::CorrelatedWithAlpha { kappa } => kappa * alpha[i] + v,
            };
            let u_it = config.sigma_u
                * match &heavy {
                    None => StandardNormal.sample(rng),
                    Some((dist, scale)) => scale * dist.sample(rng),
                };
            let kept = step.checked_sub(burn);
            let g = kept.map_or(0.0, |s| gamma[s]);
            let e_it = alpha[i] + g + config.rho * e_prev + (config.beta + beta_z * z[i]) * l_it + u_it;
            if let Some(s) = kept {
                e[i * t + s] = e_it;
                l[i * t + s] = l_it;
                u[i * t + s] = u_it;
            }
            e_prev = e_it;
            l_prev = l_it;
        }
    }

    let regions = region_names(n);
    let mut vars = BTreeMap::new();
    vars.insert(RESPONSE.to_string(), e);
    vars.insert(REGRESSOR.to_string(), l);
    if config.moderator.is_some() {
        vars.insert(MODERATOR.to_string(), z.iter().flat_map(|&zi| std::iter::repeat_n(zi, t)).collect());
    }
    let panel = Panel::new(regions, config.years(), vars)?;
    let truth = DgpTruth {
        rho: config.rho,
        beta: config.beta,
        beta_interaction: config.moderator.map(|m| m.beta_interaction),
        alpha,
        gamma,
        u,
    };
    Ok(SimulatedPanel { panel, truth })
}

/// Zero-padded so lexical and numeric order agree.
fn region_names(n: usize) -> Vec<String> {
    let width = n.to_string().len();
    (0..n).map(|i| format!("R{i:0width$}")).collect()
}

/// Synthetic pixel grid with episodic, heavy-tailed disturbance events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridDgpConfig {
    pub regions: usize,
    pub pixels_per_region: usize,
    pub first_year: i32,
    pub n_years: usize,
    /// Parameters of `ln B_p ~ N(mu, sigma²)`, B in Mg C/ha.
    pub biomass_log_mean: f64,
    pub biomass_log_sd: f64,
    /// Hectares per pixel.
    pub pixel_area: f64,
    /// Expected events per region-year (Poisson).
    pub ignition_rate: f64,
    /// Pareto scale (minimum batch size, in pixels) of an event.
    pub event_scale: f64,
    pub event_tail_index: f64,
    pub seed: u64,
}

impl Default for GridDgpConfig {
    fn default() -> Self {
        Self {
            regions: 200,
            pixels_per_region: 5000,
            first_year: 2001,
            n_years: 23,
            biomass_log_mean: 4.5,
            biomass_log_sd: 0.5,
            pixel_area: 0.09,
            ignition_rate: 0.5,
            event_scale: 1.0,
            event_tail_index: 1.5,
            seed: 0,
        }
    }
}

impl GridDgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regions == 0 || self.pixels_per_region == 0 || self.n_years == 0 {
            return Err(Error::InvalidConfig("grid counts must be positive".into()));
        }
        let positive = [
            ("biomass_log_sd", self.biomass_log_sd, true),
            ("pixel_area", self.pixel_area, false),
            ("ignition_rate", self.ignition_rate, true),
            ("event_scale", self.event_scale, false),
            ("event_tail_index", self.event_tail_index, false),
        ];
        for (name, v, zero_ok) in positive {
            if !v.is_finite() || v < 0.0 || (!zero_ok && v == 0.0) {
                return Err(Error::InvalidConfig(format!("{name} out of range: {v}")));
            }
        }
        if !self.biomass_log_mean.is_finite() {
            return Err(Error::InvalidConfig("biomass_log_mean must be finite".into()));
        }
        Ok(())
    }

    pub fn years(&self) -> Vec<i32> {
        (0..self.n_years as i32).map(|s| self.first_year + s).collect()
    }
}

pub fn simulate_disturbance_grid(config: &GridDgpConfig) -> Result<PixelGrid> {
    config.validate()?;
    let rng = &mut ChaCha8Rng::seed_from_u64(config.seed);
    let biomass = LogNormal::new(config.biomass_log_mean, config.biomass_log_sd)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let canopy = Uniform::new_inclusive(0.0, 100.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let sizes = Pareto::new(config.event_scale, config.event_tail_index).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let ignitions = (config.ignition_rate > 0.0)
        .then(|| Poisson::new(config.ignition_rate).map_err(|e| Error::InvalidConfig(e.to_string())))
        .transpose()?;

    let names = region_names(config.regions);
    let mut pixels = Vec::with_capacity(config.regions * config.pixels_per_region);
    let mut events = Vec::new();
    let mut truncated = 0usize;
    for (r, region) in names.iter().enumerate() {
        let base = (r * config.pixels_per_region) as u64;
        for k in 0..config.pixels_per_region as u64 {
            pixels.push(Pixel {
                id: base + k,
                region: region.clone(),
                biomass: biomass.sample(rng),
                area: config.pixel_area,
                canopy: canopy.sample(rng),
            });
        }
        let mut intact: Vec<u64> = (0..config.pixels_per_region as u64).map(|k| base + k).collect();
        for year in config.years() {
            let count = ignitions.as_ref().map_or(0, |p| p.sample(rng) as u64);
            for _ in 0..count {
                let demand = sizes.sample(rng).ceil();
                let take = if demand >= intact.len() as f64 { intact.len() } else { demand as usize };
                if (take as f64) < demand {
                    truncated += 1;
                    log::debug!("event in {region}/{year} wanted {demand} pixels, {take} remained");
                }
                for _ in 0..take {
                    let j = rng.random_range(0..intact.len());
                    events.push((intact.swap_remove(j), year));
                }
            }
        }
    }
    if truncated > 0 {
        log::info!("{truncated} disturbance events truncated by remaining intact pixels");
    }
    PixelGrid::new(pixels, events)
}

/// Estimator applied in each replication of [`monte_carlo`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorChoice {
    Pooled,
    Fe2w,
    Lsdv,
    DiffGmm { options: GmmOptions },
    SysGmm { options: GmmOptions },
}

impl EstimatorChoice {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorChoice::Pooled => "pooled",
            EstimatorChoice::Fe2w => "fe2w",
            EstimatorChoice::Lsdv => "lsdv",
            EstimatorChoice::DiffGmm { .. } => "diffgmm",
            EstimatorChoice::SysGmm { .. } => "sysgmm",
        }
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self, EstimatorChoice::Lsdv | EstimatorChoice::DiffGmm { .. } | EstimatorChoice::SysGmm { .. })
    }

    /// The regression each replication runs: `e` on `l` (and `l:Z` with a
    /// moderator); dynamic estimators add `L1.e` themselves.
    pub fn fit(&self, panel: &Panel) -> Result<FitResult> {
        let mut regs = vec![Term::var(REGRESSOR)];
        if panel.has_variable(MODERATOR) {
            regs.push(Term::interact(REGRESSOR, MODERATOR));
        }
        let spec = RegressionSpec::twoway(RESPONSE, regs.clone());
        match self {
            EstimatorChoice::Pooled => fit_pooled_ols(panel, &RegressionSpec::pooled(RESPONSE, regs, true)),
            EstimatorChoice::Fe2w => fit_twoway_fe(panel, &spec),
            EstimatorChoice::Lsdv => fit_dynamic_lsdv(panel, &spec),
            EstimatorChoice::DiffGmm { options } => fit_diff_gmm(panel, &spec, options),
            EstimatorChoice::SysGmm { options } => fit_sys_gmm(panel, &spec, options),
        }
    }
}

/// A coefficient tracked across replications and its true value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub name: String,
    pub truth: f64,
}

impl Target {
    pub fn new(name: impl Into<String>, truth: f64) -> Self {
        Self { name: name.into(), truth }
    }
}

/// Default targets of an estimator on this DGP.
pub fn targets_for(config: &DgpConfig, choice: &EstimatorChoice) -> Vec<Target> {
    let mut out = Vec::new();
    if choice.is_dynamic() {
        out.push(Target::new(LAG_RESPONSE, config.rho));
    }
    out.push(Target::new(REGRESSOR, config.beta));
    if let Some(m) = config.moderator {
        out.push(Target::new(format!("{REGRESSOR}:{MODERATOR}"), m.beta_interaction));
    }
    out
}

/// What one replication reports: `(estimate, std_error)` per coefficient and
/// any scalar side statistics (diagnostic p-values, R², ...).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RepMeasure {
    pub estimates: BTreeMap<String, (f64, f64)>,
    pub stats: BTreeMap<String, f64>,
}

impl RepMeasure {
    pub fn from_fit(fit: &FitResult) -> Self {
        let estimates = fit.coefficients.iter().map(|c| (c.name.clone(), (c.estimate, c.std_error))).collect();
        let mut stats = BTreeMap::new();
        if let Ok(r2) = diagnostics::within_r2(fit) {
            stats.insert("within_r2".into(), r2);
        }
        if fit.gmm.is_some() {
            for (key, res) in [
                ("ar1_p", diagnostics::ar_test(fit, 1)),
                ("ar2_p", diagnostics::ar_test(fit, 2)),
                ("hansen_p", diagnostics::hansen_j(fit)),
            ] {
                if let Ok(r) = res {
                    stats.insert(key.into(), r.p_value);
                }
            }
        }
        Self { estimates, stats }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    /// One entry per target, in target order; empty on failure.
    pub estimates: Vec<ParamEstimate>,
    pub stats: BTreeMap<String, f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub truth: f64,
    pub n: usize,
    pub mean: f64,
    pub bias: f64,
    pub rmse: f64,
    /// Share of replications whose `estimate ± 1.96 se` contains the truth.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub label: String,
    pub seed: u64,
    pub reps: usize,
    pub failures: usize,
    pub summaries: Vec<ParamSummary>,
    /// Mean of each side statistic over successful replications.
    pub stat_means: BTreeMap<String, f64>,
    pub records: Vec<RepRecord>,
}

impl Study {
    pub fn summary(&self, name: &str) -> Option<&ParamSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    /// Share of successful replications with `stats[key] < level`, among those reporting it.
    pub fn rejection_rate(&self, key: &str, level: f64) -> Option<f64> {
        let ps: Vec<f64> = self.records.iter().filter_map(|r| r.stats.get(key).copied()).collect();
        (!ps.is_empty()).then(|| ps.iter().filter(|&&p| p < level).count() as f64 / ps.len() as f64)
    }

    /// One row per replication; see [`write_studies_csv`].
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_studies_csv(std::slice::from_ref(self), writer)
    }
}

/// One row per (study, replication):
/// `estimator,rep,status,<param>,<param>_se,...,<stat>...,error`.
/// Columns are the union over studies; cells a study lacks are empty.
pub fn write_studies_csv<W: Write>(studies: &[Study], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut params: Vec<&str> = Vec::new();
    for s in studies.iter().flat_map(|s| &s.summaries) {
        if !params.contains(&s.name.as_str()) {
            params.push(&s.name);
        }
    }
    let stat_keys: BTreeSet<&String> = studies.iter().flat_map(|s| &s.records).flat_map(|r| r.stats.keys()).collect();
    let mut header = vec!["estimator".to_string(), "rep".to_string(), "status".to_string()];
    for p in &params {
        header.push(p.to_string());
        header.push(format!("{p}_se"));
    }
    header.extend(stat_keys.iter().map(|k| k.to_string()));
    header.push("error".into());
    w.write_record(&header).map_err(csv_err)?;
    for study in studies {
        for r in &study.records {
            let status = if r.error.is_some() { "failed" } else { "ok" };
            let mut row = vec![study.label.clone(), r.rep.to_string(), status.to_string()];
            for p in &params {
                match r.estimates.iter().find(|e| e.name == *p) {
                    Some(e) => {
                        row.push(format!("{:?}", e.estimate));
                        row.push(format!("{:?}", e.std_error));
                    }
                    None => row.extend([String::new(), String::new()]),
                }
            }
            row.extend(stat_keys.iter().map(|k| r.stats.get(*k).map_or(String::new(), |v| format!("{v:?}"))));
            row.push(r.error.clone().unwrap_or_default());
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub fn monte_carlo(config: &DgpConfig, choice: &EstimatorChoice, reps: usize) -> Result<Study> {
    let targets = targets_for(config, choice);
    monte_carlo_with(config, choice.label(), &targets, reps, |sim| Ok(RepMeasure::from_fit(&choice.fit(&sim.panel)?)))
}

/// Runs `measure` on `reps` independent simulated panels in parallel and
/// aggregates the named targets. A replication fails when `measure` errs or
/// omits a target; failures are kept in `records` and counted, not aggregated.
pub fn monte_carlo_with<F>(config: &DgpConfig, label: &str, targets: &[Target], reps: usize, measure: F) -> Result<Study>
where
    F: Fn(&SimulatedPanel) -> Result<RepMeasure> + Sync,
{
    config.validate()?;
    if reps < 2 {
        return Err(Error::InvalidConfig(format!("Monte Carlo needs at least 2 replications, got {reps}")));
    }
    let records: Vec<RepRecord> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let outcome = simulate_with_rng(config, &mut replication_rng(config.seed, rep as u64))
                .and_then(|sim| measure(&sim))
                .and_then(|m| {
                    let estimates = targets
                        .iter()
                        .map(|t| {
                            m.estimates
                                .get(&t.name)
                                .map(|&(estimate, std_error)| ParamEstimate { name: t.name.clone(), estimate, std_error })
                                .ok_or_else(|| Error::UnknownVariable(format!("coefficient `{}`", t.name)))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok((estimates, m.stats))
                });
            match outcome {
                Ok((estimates, stats)) => RepRecord { rep, estimates, stats, error: None },
                Err(e) => RepRecord { rep, estimates: Vec::new(), stats: BTreeMap::new(), error: Some(e.to_string()) },
            }
        })
        .collect();
    Ok(aggregate(config.seed, label, targets, records))
}

/// Pure function of the ordered records.
pub fn aggregate(seed: u64, label: &str, targets: &[Target], records: Vec<RepRecord>) -> Study {
    let ok: Vec<&RepRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let summaries = targets
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let n = ok.len();
            let ests: Vec<&ParamEstimate> = ok.iter().map(|r| &r.estimates[j]).collect();
            let nf = n as f64;
            let mean = ests.iter().map(|e| e.estimate).sum::<f64>() / nf;
            let mse = ests.iter().map(|e| (e.estimate - t.truth).powi(2)).sum::<f64>() / nf;
            let covered = ests.iter().filter(|e| (e.estimate - t.truth).abs() <= 1.96 * e.std_error).count();
            ParamSummary {
                name: t.name.clone(),
                truth: t.truth,
                n,
                mean,
                bias: mean - t.truth,
                rmse: mse.sqrt(),
                coverage: covered as f64 / nf,
            }
        })
        .collect();
    let mut stat_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in &ok {
        for (k, v) in &r.stats {
            let entry = stat_sums.entry(k.clone()).or_insert((0.0, 0));
            entry.0 += v;
            entry.1 += 1;
        }
    }
    Study {
        label: label.to_string(),
        seed,
        reps: records.len(),
        failures: records.len() - ok.len(),
        summaries,
        stat_means: stat_sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
        records,
    }
}

/// Standard-normal draws for callers that need extra noise on the same stream.
pub fn normal_draws(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Result<Vec<f64>> {
    let dist = Normal::new(0.0, sd).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{aggregate_loss, describe, LOSS};

    fn quiet(n: usize, t: usize) -> DgpConfig {
        DgpConfig {
            n_regions: n,
            n_years: t,
            rho: 0.0,
            beta: 1.7,
            sigma_alpha: 0.0,
            sigma_gamma: 0.0,
            sigma_u: 0.0,
            ..DgpConfig::default()
        }
    }

    #[test]
    fn recursion_collapses_without_noise() {
        let sim = simulate_dynamic_panel(&quiet(5, 7)).unwrap();
        let e = sim.panel.variable(RESPONSE).unwrap();
        let l = sim.panel.variable(REGRESSOR).unwrap();
        assert!(e.iter().zip(l).all(|(e, l)| *e == 1.7 * l));
        assert!(sim.truth.u.iter().all(|u| *u == 0.0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = DgpConfig { n_regions: 20, n_years: 8, seed: 42, ..DgpConfig::default() };
        assert_eq!(simulate_dynamic_panel(&cfg).unwrap(), simulate_dynamic_panel(&cfg).unwrap());
        let other = DgpConfig { seed: 43, ..cfg.clone() };
        assert_ne!(simulate_dynamic_panel(&cfg).unwrap().panel, simulate_dynamic_panel(&other).unwrap().panel);
    }

    #[test]
    fn truth_reproduces_the_recursion() {
        let cfg = DgpConfig {
            n_regions: 4,
            n_years: 6,
            moderator: Some(ModeratorConfig { share: 0.5, beta_interaction: 0.4 }),
            ..DgpConfig::default()
        };
        let sim = simulate_dynamic_panel(&cfg).unwrap();
        let (p, tr) = (&sim.panel, &sim.truth);
        for i in 0..4 {
            for s in 1..6 {
                let z = p.value(MODERATOR, i, s).unwrap();
                let fitted = tr.alpha[i]
                    + tr.gamma[s]
                    + cfg.rho * p.value(RESPONSE, i, s - 1).unwrap()
                    + (cfg.beta + 0.4 * z) * p.value(REGRESSOR, i, s).unwrap()
                    + tr.u[i * 6 + s];
                assert!((fitted - p.value(RESPONSE, i, s).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(DgpConfig { rho: 1.0, ..DgpConfig::default() }.validate().is_err());
        assert!(DgpConfig { burn_in: 49, ..DgpConfig::default() }.validate().is_err());
        assert!(DgpConfig { sigma_u: -1.0, ..DgpConfig::default() }.validate().is_err());
        assert!(GridDgpConfig { regions: 0, ..GridDgpConfig::default() }.validate().is_err());
    }

    #[test]
    fn calibration_formula() {
        let s = calibrate_sigma_u(0.0, 1.0, 1.0, 0.5).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        assert!(calibrate_sigma_u(0.9, 1.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn no_ignition_means_no_loss() {
        let g = simulate_disturbance_grid(&GridDgpConfig {
            regions: 3,
            pixels_per_region: 50,
            ignition_rate: 0.0,
            ..GridDgpConfig::default()
        })
        .unwrap();
        assert_eq!(g.n_events(), 0);
    }

    #[test]
    fn single_pixel_is_lost_once() {
        let g = simulate_disturbance_grid(&GridDgpConfig {
            regions: 1,
            pixels_per_region: 1,
            n_years: 5,
            ignition_rate: 50.0,
            ..GridDgpConfig::default()
        })
        .unwrap();
        assert_eq!(g.loss_events().collect::<Vec<_>>(), vec![(0, 2001)]);
    }

    #[test]
    fn grid_loss_never_exceeds_region_area() {
        let cfg = GridDgpConfig { regions: 5, pixels_per_region: 40, ignition_rate: 3.0, ..GridDgpConfig::default() };
        let g = simulate_disturbance_grid(&cfg).unwrap();
        let l = aggregate_loss(&g, &cfg.years()).unwrap();
        for i in 0..5 {
            let total: f64 = (0..cfg.n_years).map(|s| l.value(LOSS, i, s).unwrap()).sum();
            assert!(total <= 40.0 * cfg.pixel_area + 1e-12);
        }
        assert_eq!(g, simulate_disturbance_grid(&cfg).unwrap());
    }

    #[test]
    fn default_grid_is_heavy_tailed() {
        let cfg = GridDgpConfig::default();
        let g = simulate_disturbance_grid(&cfg).unwrap();
        let l = aggregate_loss(&g, &cfg.years()).unwrap();
        let s = describe(l.variable(LOSS).unwrap()).unwrap();
        assert!(s.max / s.mean > 100.0, "max/mean = {}", s.max / s.mean);
        assert!(s.skewness > 2.0, "skewness = {}", s.skewness);
    }

    #[test]
    fn stub_estimator_returning_truth() {
        let cfg = DgpConfig { n_regions: 3, n_years: 4, ..DgpConfig::default() };
        let targets = [Target::new("l", cfg.beta), Target::new("L1.e", cfg.rho)];
        let study = monte_carlo_with(&cfg, "stub", &targets, 5, |sim| {
            let mut m = RepMeasure::default();
            m.estimates.insert("l".into(), (sim.truth.beta, 0.0));
            m.estimates.insert("L1.e".into(), (sim.truth.rho, 0.0));
            Ok(m)
        })
        .unwrap();
        for s in &study.summaries {
            assert_eq!((s.bias, s.rmse, s.coverage, s.n), (0.0, 0.0, 1.0, 5));
        }
        assert_eq!(study.failures, 0);
    }

    #[test]
    fn failures_are_counted_not_aggregated() {
        let cfg = DgpConfig { n_regions: 3, n_years: 4, ..DgpConfig::default() };
        let targets = [Target::new("l", 1.0)];
        let study = monte_carlo_with(&cfg, "flaky", &targets, 6, |sim| {
            if sim.truth.alpha[0] > 0.0 {
                return Err(Error::Numerical("boom".into()));
            }
            let mut m = RepMeasure::default();
            m.estimates.insert("l".into(), (2.0, 1.0));
            Ok(m)
        })
        .unwrap();
        let failed = study.records.iter().filter(|r| r.error.is_some()).count();
        assert_eq!(study.failures, failed);
        assert_eq!(study.summaries[0].n, 6 - failed);
        assert_eq!(study.records.iter().map(|r| r.rep).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
        assert!(monte_carlo_with(&cfg, "x", &targets, 1, |_| Ok(RepMeasure::default())).is_err());
    }

    #[test]
    fn aggregates_match_recomputation_and_csv_rows() {
        let cfg = DgpConfig { n_regions: 30, n_years: 6, seed: 9, ..DgpConfig::default() };
        let study = monte_carlo(&cfg, &EstimatorChoice::Fe2w, 7).unwrap();
        let ests: Vec<f64> = study.records.iter().map(|r| r.estimates[0].estimate).collect();
        let mean = ests.iter().sum::<f64>() / 7.0;
        let s = study.summary("l").unwrap();
        assert!((s.mean - mean).abs() < 1e-14);
        let rmse = (ests.iter().map(|e| (e - cfg.beta).powi(2)).sum::<f64>() / 7.0).sqrt();
        assert!((s.rmse - rmse).abs() < 1e-14);
        let mut buf = Vec::new();
        study.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 8);
    }

    #[test]
    fn replications_do_not_depend_on_thread_count() {
        let cfg = DgpConfig { n_regions: 20, n_years: 6, seed: 3, ..DgpConfig::default() };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| monte_carlo(&cfg, &EstimatorChoice::Lsdv, 6).unwrap())
        };
        assert_eq!(run(1), run(4));
        let solo = simulate_with_rng(&cfg, &mut replication_rng(3, 4)).unwrap();
        let fit = EstimatorChoice::Lsdv.fit(&solo.panel).unwrap();
        assert_eq!(run(2).records[4].estimates[1].estimate, fit.estimate("l").unwrap());
    }
}
