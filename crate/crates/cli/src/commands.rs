use std::collections::BTreeMap;
use std::fs;

use carbonpanel::dgp::{
    monte_carlo, simulate_disturbance_grid, simulate_dynamic_panel, write_studies_csv, DgpConfig, EstimatorChoice,
    GridDgpConfig, ParamSummary, Study,
};
use carbonpanel::diagnostics::{diagnose, DiagnosticReport};
use carbonpanel::estimators::{
    fit_diff_gmm, fit_dynamic_lsdv, fit_heterogeneous, fit_pooled_ols, fit_sys_gmm, fit_twoway_fe,
    long_run_elasticity, ElasticityReport,
};
use carbonpanel::ingest::{
    build_loss_emission_panel, filter_canopy, load_panel_csv, load_pixel_grid, summary_table, write_panel_csv,
    write_pixel_grid, EmissionFactors, SummaryStats,
};
use carbonpanel::panel::exp1;
use carbonpanel::{Error, FitResult, GmmOptions, GmmSteps, Panel, RegressionSpec, Result, Term};
use serde::Serialize;
use serde_json::json;

use crate::args::{
    Command, EstimateArgs, EstimatorArg, FilterArgs, IngestArgs, ModelArgs, MonteCarloArgs, Preset, RobustnessArgs,
    SimulateArgs, SimulateKind,
};
use crate::output::{read_manifest, OutputSet};

/// Whether every requested estimation succeeded; drives the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub all_succeeded: bool,
}

const OK: Outcome = Outcome { all_succeeded: true };

pub fn run(command: &Command) -> Result<Outcome> {
    match command {
        Command::Ingest(a) => ingest(command, a),
        Command::Estimate(a) => estimate(command, a),
        Command::Robustness(a) => robustness(command, a),
        Command::Montecarlo(a) => montecarlo(command, a),
        Command::Simulate(a) => simulate(command, a),
        Command::Replay(a) => {
            let mut recorded = read_manifest(&a.manifest)?.command;
            recorded.set_out_dir(a.out.clone());
            run(&recorded)
        }
    }
}

#[derive(Serialize)]
struct IngestSummary {
    n_regions: usize,
    n_years: usize,
    first_year: i32,
    last_year: i32,
    dropped_regions: Vec<String>,
    variables: BTreeMap<String, SummaryStats>,
}

fn ingest(command: &Command, a: &IngestArgs) -> Result<Outcome> {
    let (panel, dropped) = match (&a.panel, &a.pixels, &a.events) {
        (Some(path), _, _) => {
            let b = load_panel_csv(path)?;
            (b.panel, b.dropped)
        }
        (None, Some(pixels), Some(events)) => {
            let grid = filter_canopy(&load_pixel_grid(pixels, events)?, a.canopy)?;
            let event_years: Vec<i32> = grid.loss_events().map(|(_, y)| y).collect();
            let first = a.first_year.or_else(|| event_years.iter().min().copied());
            let last = a.last_year.or_else(|| event_years.iter().max().copied());
            let (Some(first), Some(last)) = (first, last) else {
                return Err(Error::InvalidConfig("no loss events; pass --first-year and --last-year".into()));
            };
            if last < first {
                return Err(Error::InvalidConfig(format!("--last-year {last} precedes --first-year {first}")));
            }
            let years: Vec<i32> = (first..=last).collect();
            (build_loss_emission_panel(&grid, &EmissionFactors::new(a.theta)?, &years)?, Vec::new())
        }
        _ => return Err(Error::InvalidConfig("pass --panel, or both --pixels and --events".into())),
    };
    for r in &dropped {
        log::warn!("dropped incomplete region `{r}`");
    }
    let summary = IngestSummary {
        n_regions: panel.n_regions(),
        n_years: panel.n_years(),
        first_year: panel.first_year(),
        last_year: *panel.years().last().expect("nonempty"),
        dropped_regions: dropped,
        variables: summary_table(&panel)?,
    };
    let mut out = OutputSet::new();
    out.add_with("panel.csv", |w| write_panel_csv(&panel, w))?;
    out.add_json("summary.json", &summary)?;
    print_summary(&summary.variables);
    out.write(command.out_dir(), command, None, serde_json::to_value(a)?)?;
    Ok(OK)
}

fn print_summary(table: &BTreeMap<String, SummaryStats>) {
    println!("{:<10} {:>8} {:>14} {:>14} {:>14} {:>14} {:>14}", "variable", "n", "mean", "std", "min", "median", "max");
    for (name, s) in table {
        println!(
            "{:<10} {:>8} {:>14.4} {:>14.4} {:>14.4} {:>14.4} {:>14.4}",
            name, s.n, s.mean, s.std, s.min, s.median, s.max
        );
    }
}

/// A regression problem after filters are applied.
struct Prepared {
    panel: Panel,
    response: String,
    regressors: Vec<Term>,
    moderator: Option<String>,
    exclude_years: Vec<i32>,
}

fn rename_term(term: &Term, f: &impl Fn(&str) -> String) -> Term {
    match term {
        Term::Var(v) => Term::Var(f(v)),
        Term::Lag { var, k } => Term::Lag { var: f(var), k: *k },
        Term::Interact(a, b) => Term::Interact(f(a), b.clone()),
    }
}

fn prepare(panel: &Panel, model: &ModelArgs, filters: &FilterArgs) -> Result<Prepared> {
    let mut panel = if filters.regions.is_empty() { panel.clone() } else { panel.subset_regions(&filters.regions)? };
    for y in &filters.exclude_years {
        if panel.year_index(*y).is_none() {
            return Err(Error::InvalidSpec(format!("excluded year {y} is not in the panel")));
        }
    }
    if filters.exclude_years.len() >= panel.n_years() {
        return Err(Error::InvalidSpec("year exclusion leaves no years".into()));
    }
    let mut regressors: Vec<Term> = model.regressors.iter().map(|r| r.parse()).collect::<Result<_>>()?;
    if regressors.is_empty() {
        return Err(Error::InvalidSpec("at least one regressor is required".into()));
    }
    let mut response = model.response.clone();
    if filters.levels {
        let mut logs = vec![response.clone()];
        for t in &regressors {
            let v = match t {
                Term::Var(v) | Term::Lag { var: v, .. } | Term::Interact(v, _) => v,
            };
            if !logs.contains(v) {
                logs.push(v.clone());
            }
        }
        for v in &logs {
            let level = v.to_uppercase();
            if level == *v {
                return Err(Error::InvalidSpec(format!("`{v}` has no lowercase log form to map to levels")));
            }
            if !panel.has_variable(&level) {
                let values = panel.variable(v)?.iter().map(|&x| exp1(x)).collect();
                panel = panel.with_variable(&level, values)?;
            }
        }
        response = response.to_uppercase();
        regressors = regressors.iter().map(|t| rename_term(t, &|v: &str| v.to_uppercase())).collect();
    }
    Ok(Prepared { panel, response, regressors, moderator: model.moderator.clone(), exclude_years: filters.exclude_years.clone() })
}

fn gmm_options(model: &ModelArgs) -> GmmOptions {
    GmmOptions {
        min_lag: model.min_lag,
        max_lag: model.max_lag,
        collapse: model.collapse,
        steps: if model.two_step { GmmSteps::Two } else { GmmSteps::One },
        ..GmmOptions::default()
    }
}

fn fit_one(p: &Prepared, which: EstimatorArg, options: &GmmOptions) -> Result<FitResult> {
    let mut regs = p.regressors.clone();
    let main = regs[0].clone();
    if let (Some(z), Term::Var(v)) = (&p.moderator, &main) {
        if which != EstimatorArg::Lsdv {
            regs.push(Term::interact(v.clone(), z.clone()));
        }
    }
    let twoway = RegressionSpec::twoway(p.response.clone(), regs.clone()).excluding_years(p.exclude_years.clone());
    match which {
        EstimatorArg::Pooled => {
            fit_pooled_ols(&p.panel, &RegressionSpec::pooled(p.response.clone(), regs, true).excluding_years(p.exclude_years.clone()))
        }
        EstimatorArg::Fe2w => fit_twoway_fe(&p.panel, &twoway),
        EstimatorArg::Lsdv => match &p.moderator {
            Some(z) => fit_heterogeneous(&p.panel, &twoway, z).map(|h| h.fit),
            None => fit_dynamic_lsdv(&p.panel, &twoway),
        },
        EstimatorArg::Diffgmm => fit_diff_gmm(&p.panel, &twoway, options),
        EstimatorArg::Sysgmm => fit_sys_gmm(&p.panel, &twoway, options),
        EstimatorArg::All => unreachable!("expanded before fitting"),
    }
}

/// One estimator's output in `report.json`.
#[derive(Serialize)]
pub struct FitEntry {
    pub estimator: String,
    pub fit: FitResult,
    pub elasticity: Option<ElasticityReport>,
    /// `(moderator value, β + β_Z z)` for each distinct moderator value.
    pub regimes: Option<Vec<(f64, f64)>>,
    pub diagnostics: DiagnosticReport,
}

#[derive(Serialize)]
pub struct FailedFit {
    pub estimator: String,
    pub error: String,
}

#[derive(Serialize)]
pub struct EstimateReport {
    pub n_regions: usize,
    pub n_years: usize,
    pub years: Vec<i32>,
    pub response: String,
    pub regressors: Vec<String>,
    pub excluded_years: Vec<i32>,
    pub fits: Vec<FitEntry>,
    pub failures: Vec<FailedFit>,
}

/// Elasticity report whenever the fit carries both `β` and `L1.<response>`.
pub fn elasticity_for(fit: &FitResult, beta: &str) -> Option<ElasticityReport> {
    let rho = format!("L1.{}", fit.response);
    if fit.index_of(beta).is_none() || fit.index_of(&rho).is_none() {
        return None;
    }
    match long_run_elasticity(fit, beta, &rho) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("long-run elasticity unavailable: {e}");
            None
        }
    }
}

fn regimes(p: &Prepared, fit: &FitResult) -> Option<Vec<(f64, f64)>> {
    let z = p.moderator.as_ref()?;
    let Term::Var(v) = &p.regressors[0] else { return None };
    let beta = fit.estimate(v).ok()?;
    let beta_z = fit.estimate(&format!("{v}:{z}")).unwrap_or(0.0);
    let mut values: Vec<f64> = p.panel.variable(z).ok()?.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    (values.len() <= 10).then(|| values.iter().map(|&zv| (zv, beta + beta_z * zv)).collect())
}

fn fit_entries(p: &Prepared, which: EstimatorArg, options: &GmmOptions) -> (Vec<FitEntry>, Vec<FailedFit>) {
    let beta = p.regressors[0].name();
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for est in which.expand() {
        match fit_one(p, est, options) {
            Ok(fit) => fits.push(FitEntry {
                estimator: est.label().to_string(),
                elasticity: elasticity_for(&fit, &beta),
                regimes: regimes(p, &fit),
                diagnostics: diagnose(&fit),
                fit,
            }),
            Err(e) => {
                log::error!("{}: {e}", est.label());
                failures.push(FailedFit { estimator: est.label().to_string(), error: e.to_string() });
            }
        }
    }
    (fits, failures)
}

fn print_fits(fits: &[FitEntry], failures: &[FailedFit]) {
    for entry in fits {
        println!("[{}] n_obs = {}, clusters = {}", entry.estimator, entry.fit.n_obs, entry.fit.n_clusters);
        for c in entry.fit.coefficients.iter().filter(|c| !c.name.contains('[') && c.name != "_cons") {
            println!("  {:<14} {:>12.6} ({:.6})", c.name, c.estimate, c.std_error);
        }
        if let Some(el) = &entry.elasticity {
            println!("  {:<14} {:>12.6} ({:.6})", "long-run", el.long_run, el.long_run_se);
        }
        for note in &entry.fit.notes {
            println!("  note: {note}");
        }
    }
    for f in failures {
        println!("[{}] failed: {}", f.estimator, f.error);
    }
}

fn estimate(command: &Command, a: &EstimateArgs) -> Result<Outcome> {
    let panel = load_panel_csv(&a.panel)?.panel;
    let p = prepare(&panel, &a.model, &a.filters)?;
    let options = gmm_options(&a.model);
    let (fits, failures) = fit_entries(&p, a.model.estimator, &options);
    print_fits(&fits, &failures);

    let mut out = OutputSet::new();
    if a.plot_data {
        out.add_with("scatter.csv", |w| write_scatter(&p, &fits, w))?;
        out.add_with("elasticity.csv", |w| write_elasticities(&fits, w))?;
    }
    let outcome = Outcome { all_succeeded: failures.is_empty() };
    let report = EstimateReport {
        n_regions: p.panel.n_regions(),
        n_years: p.panel.n_years(),
        years: p.panel.years().to_vec(),
        response: p.response.clone(),
        regressors: p.regressors.iter().map(Term::name).collect(),
        excluded_years: p.exclude_years.clone(),
        fits,
        failures,
    };
    out.add_json("report.json", &report)?;
    let resolved = json!({ "estimate": a, "gmm_options": options });
    out.write(command.out_dir(), command, None, resolved)?;
    Ok(outcome)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Demeaned `(response, regressor)` pairs of the first within fit, one row per observation used.
fn write_scatter(p: &Prepared, fits: &[FitEntry], w: &mut Vec<u8>) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    let Some((fit, sample)) = ["fe2w", "lsdv"]
        .iter()
        .filter_map(|label| fits.iter().find(|f| f.estimator == *label))
        .find_map(|f| f.fit.within_sample.as_ref().map(|s| (&f.fit, s)))
    else {
        writer.write_record(["estimator", "region", "year", "response", "regressor"]).map_err(csv_error)?;
        writer.flush()?;
        return Ok(());
    };
    let beta = p.regressors[0].name();
    let j = sample.regressor_names.iter().position(|n| *n == beta).unwrap_or(0);
    writer
        .write_record([
            "estimator".to_string(),
            "region".to_string(),
            "year".to_string(),
            format!("{}_demeaned", fit.response),
            format!("{beta}_demeaned"),
        ])
        .map_err(csv_error)?;
    for (row, &(i, s)) in sample.rows.iter().enumerate() {
        writer
            .write_record([
                fit.estimator.to_string(),
                p.panel.regions()[i].clone(),
                p.panel.years()[s].to_string(),
                format!("{:?}", sample.response[row]),
                format!("{:?}", sample.regressors[j][row]),
            ])
            .map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

fn write_elasticities(fits: &[FitEntry], w: &mut Vec<u8>) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer
        .write_record(["estimator", "short_run", "short_run_se", "persistence", "persistence_se", "long_run", "long_run_se"])
        .map_err(csv_error)?;
    for f in fits {
        let Some(e) = &f.elasticity else { continue };
        let cells = [e.short_run, e.short_run_se, e.persistence, e.persistence_se, e.long_run, e.long_run_se];
        let mut rec = vec![f.estimator.clone()];
        rec.extend(cells.iter().map(|v| format!("{v:?}")));
        writer.write_record(&rec).map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RobustnessColumn {
    label: String,
    filters: FilterArgs,
    n_regions: usize,
    fits: Vec<RobustnessCell>,
    failures: Vec<FailedFit>,
}

#[derive(Serialize)]
struct RobustnessCell {
    estimator: String,
    n_obs: usize,
    /// name → (estimate, std_error), excluding dummy columns.
    coefficients: BTreeMap<String, (f64, f64)>,
    long_run: Option<f64>,
}

fn robustness(command: &Command, a: &RobustnessArgs) -> Result<Outcome> {
    if a.filters.is_empty() {
        return Err(Error::InvalidConfig("robustness needs --exclude-years, --regions or --levels".into()));
    }
    let panel = load_panel_csv(&a.panel)?.panel;
    let options = gmm_options(&a.model);
    let mut variations = vec![("base".to_string(), FilterArgs::default())];
    if !a.filters.exclude_years.is_empty() {
        let years: Vec<String> = a.filters.exclude_years.iter().map(i32::to_string).collect();
        variations.push((
            format!("exclude_years={}", years.join(",")),
            FilterArgs { exclude_years: a.filters.exclude_years.clone(), ..FilterArgs::default() },
        ));
    }
    if !a.filters.regions.is_empty() {
        variations.push((
            format!("regions={}", a.filters.regions.len()),
            FilterArgs { regions: a.filters.regions.clone(), ..FilterArgs::default() },
        ));
    }
    if a.filters.levels {
        variations.push(("levels".to_string(), FilterArgs { levels: true, ..FilterArgs::default() }));
    }

    let mut columns = Vec::new();
    let mut all_ok = true;
    for (label, filters) in variations {
        let p = prepare(&panel, &a.model, &filters)?;
        let (fits, failures) = fit_entries(&p, a.model.estimator, &options);
        all_ok &= failures.is_empty();
        let cells = fits
            .iter()
            .map(|f| RobustnessCell {
                estimator: f.estimator.clone(),
                n_obs: f.fit.n_obs,
                coefficients: f
                    .fit
                    .coefficients
                    .iter()
                    .filter(|c| !c.name.contains('[') && c.name != "_cons")
                    .map(|c| (c.name.clone(), (c.estimate, c.std_error)))
                    .collect(),
                long_run: f.elasticity.as_ref().map(|e| e.long_run),
            })
            .collect();
        columns.push(RobustnessColumn { label, filters, n_regions: p.panel.n_regions(), fits: cells, failures });
    }
    print_robustness(&columns);
    let mut out = OutputSet::new();
    out.add_json("report.json", &json!({ "columns": columns }))?;
    out.write(command.out_dir(), command, None, json!({ "robustness": a, "gmm_options": options }))?;
    Ok(Outcome { all_succeeded: all_ok })
}

fn print_robustness(columns: &[RobustnessColumn]) {
    print!("{:<22}", "estimator / term");
    for c in columns {
        print!(" {:>20}", c.label);
    }
    println!();
    let Some(base) = columns.first() else { return };
    for cell in &base.fits {
        for name in cell.coefficients.keys() {
            print!("{:<22}", format!("{} {}", cell.estimator, name));
            for c in columns {
                let v = c
                    .fits
                    .iter()
                    .find(|f| f.estimator == cell.estimator)
                    .and_then(|f| f.coefficients.iter().find(|(k, _)| k.to_lowercase() == name.to_lowercase()))
                    .map(|(_, (est, _))| format!("{est:.6}"))
                    .unwrap_or_else(|| "-".into());
                print!(" {v:>20}");
            }
            println!();
        }
    }
}

fn dgp_config(config: &Option<std::path::PathBuf>, preset: Option<Preset>, seed: Option<u64>) -> Result<DgpConfig> {
    let mut cfg = match (config, preset) {
        (Some(path), _) => serde_json::from_slice(&fs::read(path)?)?,
        (None, Some(Preset::NickellDemo)) => DgpConfig::nickell_demo(),
        (None, Some(Preset::DeskCalibrated)) => DgpConfig::desk_calibrated(),
        (None, None) => DgpConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct StudyReport<'a> {
    estimator: &'a str,
    reps: usize,
    failures: usize,
    summaries: &'a [ParamSummary],
    stat_means: &'a BTreeMap<String, f64>,
    /// Share of replications rejecting at 5%, per diagnostic.
    rejection_rates: BTreeMap<String, f64>,
}

fn montecarlo(command: &Command, a: &MonteCarloArgs) -> Result<Outcome> {
    let cfg = dgp_config(&a.config, a.preset, a.seed)?;
    let options = GmmOptions {
        min_lag: a.min_lag,
        max_lag: a.max_lag,
        collapse: a.collapse,
        steps: if a.two_step { GmmSteps::Two } else { GmmSteps::One },
        ..GmmOptions::default()
    };
    options.validate()?;
    let choices: Vec<EstimatorChoice> = a
        .estimator
        .expand()
        .into_iter()
        .map(|e| match e {
            EstimatorArg::Pooled => EstimatorChoice::Pooled,
            EstimatorArg::Fe2w => EstimatorChoice::Fe2w,
            EstimatorArg::Lsdv => EstimatorChoice::Lsdv,
            EstimatorArg::Diffgmm => EstimatorChoice::DiffGmm { options: options.clone() },
            EstimatorArg::Sysgmm => EstimatorChoice::SysGmm { options: options.clone() },
            EstimatorArg::All => unreachable!("expanded"),
        })
        .collect();
    let studies: Vec<Study> = choices.iter().map(|c| monte_carlo(&cfg, c, a.reps)).collect::<Result<_>>()?;

    let reports: Vec<StudyReport> = studies
        .iter()
        .map(|s| StudyReport {
            estimator: &s.label,
            reps: s.reps,
            failures: s.failures,
            summaries: &s.summaries,
            stat_means: &s.stat_means,
            rejection_rates: ["ar1_p", "ar2_p", "hansen_p"]
                .iter()
                .filter_map(|k| s.rejection_rate(k, 0.05).map(|r| (k.trim_end_matches("_p").to_string(), r)))
                .collect(),
        })
        .collect();
    for r in &reports {
        println!("[{}] reps = {}, failures = {}", r.estimator, r.reps, r.failures);
        for s in r.summaries {
            println!(
                "  {:<8} truth {:>8.4}  mean {:>9.5}  bias {:>9.5}  rmse {:>8.5}  coverage {:>5.3}",
                s.name, s.truth, s.mean, s.bias, s.rmse, s.coverage
            );
        }
    }
    let mut out = OutputSet::new();
    out.add_with("montecarlo.csv", |w| write_studies_csv(&studies, w))?;
    out.add_json("report.json", &json!({ "dgp": cfg, "studies": reports }))?;
    let failed = studies.iter().any(|s| s.failures > 0);
    out.write(command.out_dir(), command, Some(cfg.seed), json!({ "dgp": cfg, "montecarlo": a, "gmm_options": options }))?;
    Ok(Outcome { all_succeeded: !failed })
}

fn simulate(command: &Command, a: &SimulateArgs) -> Result<Outcome> {
    let mut out = OutputSet::new();
    let (seed, resolved) = match a.kind {
        SimulateKind::Panel => {
            let cfg = dgp_config(&a.config, a.preset, a.seed)?;
            let sim = simulate_dynamic_panel(&cfg)?;
            out.add_with("panel.csv", |w| write_panel_csv(&sim.panel, w))?;
            out.add_json("truth.json", &sim.truth)?;
            (cfg.seed, serde_json::to_value(&cfg)?)
        }
        SimulateKind::Grid => {
            if a.preset.is_some() {
                return Err(Error::InvalidConfig("presets apply to panels only".into()));
            }
            let mut cfg: GridDgpConfig = match &a.config {
                Some(path) => serde_json::from_slice(&fs::read(path)?)?,
                None => GridDgpConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let grid = simulate_disturbance_grid(&cfg)?;
            let (mut pixels, mut events) = (Vec::new(), Vec::new());
            write_pixel_grid(&grid, &mut pixels, &mut events)?;
            out.add("pixels.csv", pixels);
            out.add("loss_events.csv", events);
            (cfg.seed, serde_json::to_value(&cfg)?)
        }
    };
    out.write(command.out_dir(), command, Some(seed), resolved)?;
    Ok(OK)
}
