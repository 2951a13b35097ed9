use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "carbonpanel", version, about = "Forest-loss / emissions elasticity panel toolkit")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

/// Every variant except `Replay` is recorded verbatim in `manifest.json`;
/// output directories are not, so a manifest replays into any directory.
#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
pub enum Command {
    /// Build a balanced panel from pixel CSVs, or re-emit a panel CSV, with summary statistics.
    Ingest(IngestArgs),
    /// Fit one or all estimators and write the report with diagnostics.
    Estimate(EstimateArgs),
    /// Re-fit under year exclusion, region subsets and levels, side by side with the base fit.
    Robustness(RobustnessArgs),
    /// Run a Monte Carlo study on a simulated dynamic panel.
    Montecarlo(MonteCarloArgs),
    /// Write a simulated panel or pixel grid as CSV.
    Simulate(SimulateArgs),
    /// Re-run the command recorded in a manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

impl Command {
    pub fn out_dir(&self) -> &PathBuf {
        match self {
            Command::Ingest(a) => &a.out,
            Command::Estimate(a) => &a.out,
            Command::Robustness(a) => &a.out,
            Command::Montecarlo(a) => &a.out,
            Command::Simulate(a) => &a.out,
            Command::Replay(a) => &a.out,
        }
    }

    pub fn set_out_dir(&mut self, out: PathBuf) {
        match self {
            Command::Ingest(a) => a.out = out,
            Command::Estimate(a) => a.out = out,
            Command::Robustness(a) => a.out = out,
            Command::Montecarlo(a) => a.out = out,
            Command::Simulate(a) => a.out = out,
            Command::Replay(a) => a.out = out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct IngestArgs {
    /// Panel CSV (`region,year,<vars>...`).
    #[arg(long, conflicts_with_all = ["pixels", "events"])]
    pub panel: Option<PathBuf>,
    /// Pixel table (`pixel,region,biomass,area,canopy`).
    #[arg(long, requires = "events")]
    pub pixels: Option<PathBuf>,
    /// Loss events (`pixel,year`).
    #[arg(long, requires = "pixels")]
    pub events: Option<PathBuf>,
    /// Carbon-to-CO₂e factor.
    #[arg(long, default_value_t = 44.0 / 12.0)]
    pub theta: f64,
    /// Minimum canopy cover (percent) for a pixel to count.
    #[arg(long, default_value_t = 30.0)]
    pub canopy: f64,
    /// First panel year; defaults to the earliest loss event.
    #[arg(long)]
    pub first_year: Option<i32>,
    /// Last panel year; defaults to the latest loss event.
    #[arg(long)]
    pub last_year: Option<i32>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorArg {
    Pooled,
    Fe2w,
    Lsdv,
    Diffgmm,
    Sysgmm,
    All,
}

impl EstimatorArg {
    pub const EACH: [EstimatorArg; 5] =
        [EstimatorArg::Pooled, EstimatorArg::Fe2w, EstimatorArg::Lsdv, EstimatorArg::Diffgmm, EstimatorArg::Sysgmm];

    pub fn expand(self) -> Vec<EstimatorArg> {
        match self {
            EstimatorArg::All => Self::EACH.to_vec(),
            one => vec![one],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EstimatorArg::Pooled => "pooled",
            EstimatorArg::Fe2w => "fe2w",
            EstimatorArg::Lsdv => "lsdv",
            EstimatorArg::Diffgmm => "diffgmm",
            EstimatorArg::Sysgmm => "sysgmm",
            EstimatorArg::All => "all",
        }
    }
}

/// Regression and GMM settings shared by `estimate` and `robustness`.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub estimator: EstimatorArg,
    #[arg(long, default_value = "e")]
    pub response: String,
    /// Regressor term (`l`, `L1.x`, `l:Z`); repeatable. The first is the elasticity regressor.
    #[arg(long = "regressor", default_values_t = vec!["l".to_string()])]
    pub regressors: Vec<String>,
    /// Region-constant moderator interacted with the first regressor.
    #[arg(long)]
    pub moderator: Option<String>,
    #[arg(long, default_value_t = 2)]
    pub min_lag: usize,
    #[arg(long)]
    pub max_lag: Option<usize>,
    #[arg(long)]
    pub collapse: bool,
    #[arg(long)]
    pub two_step: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Args, Serialize, Deserialize)]
pub struct FilterArgs {
    /// Years dropped from the estimation sample (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub exclude_years: Vec<i32>,
    /// Keep only these regions (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub regions: Vec<String>,
    /// Estimate in levels (`exp(x) - 1` of each log variable) instead of logs.
    #[arg(long)]
    pub levels: bool,
}

impl FilterArgs {
    pub fn is_empty(&self) -> bool {
        self.exclude_years.is_empty() && self.regions.is_empty() && !self.levels
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EstimateArgs {
    #[arg(long)]
    pub panel: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub filters: FilterArgs,
    /// Also write `scatter.csv` and `elasticity.csv`.
    #[arg(long)]
    pub plot_data: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub panel: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub filters: FilterArgs,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// N=500, T=6, ρ=0.5, β=1.
    NickellDemo,
    /// N=200, T=23, ρ=-0.01, β=1.32, within R² ≈ 0.85.
    DeskCalibrated,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct MonteCarloArgs {
    /// DGP configuration JSON; fields left out take their defaults.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, value_enum, default_value = "all")]
    pub estimator: EstimatorArg,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 2)]
    pub min_lag: usize,
    #[arg(long)]
    pub max_lag: Option<usize>,
    #[arg(long)]
    pub collapse: bool,
    #[arg(long)]
    pub two_step: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulateKind {
    Panel,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "panel")]
    pub kind: SimulateKind,
    /// DGP (panel) or grid configuration JSON.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Panel presets only.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}
