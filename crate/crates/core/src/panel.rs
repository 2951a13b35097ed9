//! Balanced region × year panels and the deterministic transforms defined on them.
//!
//! A [`Panel`] stores every variable as a dense region-major grid (`i * T + t`)
//! with no missing cells. Transforms that lose observations (lags, differences)
//! return a [`Grid`], whose unavailable cells are `None` rather than a sentinel,
//! so estimators can only ever drop them explicitly.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `(region, year, variable, value)` cell as read from long-format input.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub region: String,
    pub year: i32,
    pub variable: String,
    pub value: f64,
}

impl Observation {
    pub fn new(region: impl Into<String>, year: i32, variable: impl Into<String>, value: f64) -> Self {
        Self { region: region.into(), year, variable: variable.into(), value }
    }
}

/// Balanced annual panel. Immutable once built; every accessor borrows.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    regions: Vec<String>,
    years: Vec<i32>,
    variables: BTreeMap<String, Vec<f64>>,
}

/// Result of [`build_panel`]: the balanced panel plus the regions removed to get there.
#[derive(Debug, Clone, PartialEq)]
pub struct Balanced {
    pub panel: Panel,
    pub dropped: Vec<String>,
}

impl Panel {
    /// Builds a panel from dense region-major grids, checking every invariant.
    pub fn new(
        regions: Vec<String>,
        years: Vec<i32>,
        variables: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::Construction("panel has no regions".into()));
        }
        if years.is_empty() {
            return Err(Error::Construction("panel has no years".into()));
        }
        if years.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Construction("years must be strictly consecutive".into()));
        }
        let mut seen = HashMap::with_capacity(regions.len());
        for r in &regions {
            if seen.insert(r.as_str(), ()).is_some() {
                return Err(Error::Construction(format!("duplicate region identifier `{r}`")));
            }
        }
        let cells = regions.len() * years.len();
        for (name, values) in &variables {
            if values.len() != cells {
                return Err(Error::Construction(format!(
                    "variable `{name}` has {} cells, expected {cells}",
                    values.len()
                )));
            }
            if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Construction(format!(
                    "variable `{name}` has a non-finite value for region `{}` year {}",
                    regions[pos / years.len()],
                    years[pos % years.len()]
                )));
            }
        }
        Ok(Self { regions, years, variables })
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    pub fn first_year(&self) -> i32 {
        self.years[0]
    }

    pub fn variable_names(&self) -> impl Iterator<Item = &str> {
        self.variables.keys().map(String::as_str)
    }

    pub fn has_variable(&self, name: &str) -> bool {
        self.variables.contains_key(name)
    }

    /// Region-major values of a variable.
    pub fn variable(&self, name: &str) -> Result<&[f64]> {
        self.variables
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn value(&self, name: &str, region: usize, year_idx: usize) -> Result<f64> {
        Ok(self.variable(name)?[region * self.n_years() + year_idx])
    }

    /// The variable as a fully available [`Grid`].
    pub fn grid(&self, name: &str) -> Result<Grid> {
        let values = self.variable(name)?;
        Ok(Grid {
            n_regions: self.n_regions(),
            n_years: self.n_years(),
            cells: values.iter().copied().map(Some).collect(),
        })
    }

    pub fn year_index(&self, year: i32) -> Option<usize> {
        let idx = year.checked_sub(self.first_year())?;
        usize::try_from(idx).ok().filter(|&i| i < self.n_years())
    }

    /// Returns a new panel with `name` added. Variables are write-once.
    pub fn with_variable(&self, name: &str, values: Vec<f64>) -> Result<Panel> {
        if self.variables.contains_key(name) {
            return Err(Error::DuplicateVariable(name.to_string()));
        }
        let mut variables = self.variables.clone();
        variables.insert(name.to_string(), values);
        Panel::new(self.regions.clone(), self.years.clone(), variables)
    }

    /// Adds a grid as a variable; every cell must be available.
    pub fn with_grid(&self, name: &str, grid: &Grid) -> Result<Panel> {
        if grid.n_regions != self.n_regions() || grid.n_years != self.n_years() {
            return Err(Error::InvalidTransform(format!(
                "grid shape {}x{} does not match panel {}x{}",
                grid.n_regions,
                grid.n_years,
                self.n_regions(),
                self.n_years()
            )));
        }
        let values = grid
            .complete()
            .ok_or_else(|| Error::InvalidTransform(format!("grid for `{name}` has unavailable cells")))?;
        self.with_variable(name, values)
    }

    /// Keeps only the listed regions, in panel order.
    pub fn subset_regions(&self, keep: &[String]) -> Result<Panel> {
        for id in keep {
            if !self.regions.contains(id) {
                return Err(Error::InvalidSpec(format!("unknown region `{id}`")));
            }
        }
        let rows: Vec<usize> = (0..self.n_regions()).filter(|&i| keep.contains(&self.regions[i])).collect();
        if rows.is_empty() {
            return Err(Error::InvalidSpec("region subset is empty".into()));
        }
        let t = self.n_years();
        let variables = self
            .variables
            .iter()
            .map(|(name, v)| {
                let sub = rows.iter().flat_map(|&i| v[i * t..(i + 1) * t].iter().copied()).collect();
                (name.clone(), sub)
            })
            .collect();
        Panel::new(rows.iter().map(|&i| self.regions[i].clone()).collect(), self.years.clone(), variables)
    }

    /// Long-format cells in region, year, variable order.
    pub fn observations(&self) -> Vec<Observation> {
        let mut out = Vec::with_capacity(self.variables.len() * self.regions.len() * self.years.len());
        for (i, region) in self.regions.iter().enumerate() {
            for (t, &year) in self.years.iter().enumerate() {
                for (name, values) in &self.variables {
                    out.push(Observation::new(region.clone(), year, name.clone(), values[i * self.n_years() + t]));
                }
            }
        }
        out
    }
}

/// Assembles a balanced panel from long-format cells.
///
/// The year axis spans the smallest to largest observed year. Any region missing
/// a `(year, variable)` cell anywhere on that axis is dropped and named in
/// [`Balanced::dropped`]. Duplicate cells and non-finite values are rejected.
pub fn build_panel<I>(rows: I) -> Result<Balanced>
where
    I: IntoIterator<Item = Observation>,
{
    let mut region_order: Vec<String> = Vec::new();
    let mut region_index: HashMap<String, usize> = HashMap::new();
    let mut var_names: BTreeMap<String, ()> = BTreeMap::new();
    let mut cells: HashMap<(usize, i32, String), f64> = HashMap::new();
    let (mut min_year, mut max_year) = (i32::MAX, i32::MIN);

    for obs in rows {
        if !obs.value.is_finite() {
            return Err(Error::Construction(format!(
                "non-finite value for region `{}` year {} variable `{}`",
                obs.region, obs.year, obs.variable
            )));
        }
        let idx = *region_index.entry(obs.region.clone()).or_insert_with(|| {
            region_order.push(obs.region.clone());
            region_order.len() - 1
        });
        min_year = min_year.min(obs.year);
        max_year = max_year.max(obs.year);
        var_names.insert(obs.variable.clone(), ());
        let key = (idx, obs.year, obs.variable);
        if cells.contains_key(&key) {
            return Err(Error::Construction(format!(
                "duplicate cell for region `{}` year {} variable `{}`",
                obs.region, key.1, key.2
            )));
        }
        cells.insert(key, obs.value);
    }

    if region_order.is_empty() {
        return Err(Error::Construction("empty input".into()));
    }

    let years: Vec<i32> = (min_year..=max_year).collect();
    let names: Vec<String> = var_names.into_keys().collect();
    let complete = |i: usize| years.iter().all(|&y| names.iter().all(|v| cells.contains_key(&(i, y, v.clone()))));

    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (i, region) in region_order.iter().enumerate() {
        if complete(i) {
            kept.push(i);
        } else {
            dropped.push(region.clone());
        }
    }
    if kept.is_empty() {
        return Err(Error::Construction(format!(
            "zero surviving regions: none of {} regions has a complete {}..={} series",
            region_order.len(),
            min_year,
            max_year
        )));
    }

    let mut variables = BTreeMap::new();
    for name in &names {
        let mut values = Vec::with_capacity(kept.len() * years.len());
        for &i in &kept {
            for &y in &years {
                values.push(cells[&(i, y, name.clone())]);
            }
        }
        variables.insert(name.clone(), values);
    }
    let panel = Panel::new(kept.iter().map(|&i| region_order[i].clone()).collect(), years, variables)?;
    Ok(Balanced { panel, dropped })
}

/// A region × year grid whose cells may be unavailable (`None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n_regions: usize,
    pub n_years: usize,
    pub cells: Vec<Option<f64>>,
}

impl Grid {
    pub fn from_values(n_regions: usize, n_years: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), n_regions * n_years, "grid shape mismatch");
        Self { n_regions, n_years, cells: values.iter().copied().map(Some).collect() }
    }

    pub fn get(&self, region: usize, year_idx: usize) -> Option<f64> {
        self.cells[region * self.n_years + year_idx]
    }

    /// Dense values if no cell is flagged.
    pub fn complete(&self) -> Option<Vec<f64>> {
        self.cells.iter().copied().collect()
    }

    pub fn is_available(&self, region: usize, year_idx: usize) -> bool {
        self.get(region, year_idx).is_some()
    }

    /// `x_{i,t-k}`; the first `k` years become unavailable.
    pub fn lag(&self, k: usize) -> Result<Grid> {
        if k == 0 {
            return Err(Error::InvalidTransform("lag order must be at least 1".into()));
        }
        if k >= self.n_years {
            return Err(Error::InvalidTransform(format!("lag order {k} must be below T = {}", self.n_years)));
        }
        let t = self.n_years;
        let mut cells = vec![None; self.cells.len()];
        for i in 0..self.n_regions {
            for s in k..t {
                cells[i * t + s] = self.cells[i * t + s - k];
            }
        }
        Ok(Grid { n_regions: self.n_regions, n_years: t, cells })
    }

    /// `x_{i,t} - x_{i,t-1}`; the first year becomes unavailable.
    pub fn diff(&self) -> Result<Grid> {
        let lagged = self.lag(1)?;
        Ok(self.zip_with(&lagged, |a, b| a - b))
    }

    /// Cellwise product; a cell is available only if both inputs are.
    pub fn product(&self, other: &Grid) -> Grid {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Grid {
        assert_eq!(self.cells.len(), other.cells.len(), "grid shape mismatch");
        let cells = self
            .cells
            .iter()
            .zip(&other.cells)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(f(*a, *b)),
                _ => None,
            })
            .collect();
        Grid { n_regions: self.n_regions, n_years: self.n_years, cells }
    }
}

/// `ln(x + 1)`, defined for `x >= 0`.
pub fn log1(x: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::Domain(format!("log1 requires a nonnegative input, got {x}")));
    }
    Ok(x.ln_1p())
}

/// Inverse of [`log1`], used to recover levels from log-scale data.
pub fn exp1(y: f64) -> f64 {
    y.exp_m1()
}

/// Applies [`log1`] to every cell of a variable.
pub fn log1_variable(panel: &Panel, var: &str) -> Result<Vec<f64>> {
    panel
        .variable(var)?
        .iter()
        .map(|&x| log1(x).map_err(|e| Error::Domain(format!("variable `{var}`: {e}"))))
        .collect()
}

fn region_means(values: &[f64], n: usize, t: usize) -> Vec<f64> {
    (0..n).map(|i| values[i * t..(i + 1) * t].iter().sum::<f64>() / t as f64).collect()
}

fn year_means(values: &[f64], n: usize, t: usize) -> Vec<f64> {
    let mut means = vec![0.0; t];
    for i in 0..n {
        for (s, m) in means.iter_mut().enumerate() {
            *m += values[i * t + s];
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    means
}

/// `x_it - mean_i` on a dense region-major `n × t` block.
pub fn demean_region_values(values: &[f64], n: usize, t: usize) -> Vec<f64> {
    let rm = region_means(values, n, t);
    values.iter().enumerate().map(|(idx, &x)| x - rm[idx / t]).collect()
}

/// `x_it - mean_t` on a dense region-major `n × t` block.
pub fn demean_year_values(values: &[f64], n: usize, t: usize) -> Vec<f64> {
    let ym = year_means(values, n, t);
    values.iter().enumerate().map(|(idx, &x)| x - ym[idx % t]).collect()
}

/// `x_it - mean_i - mean_t + grand_mean` on a dense region-major `n × t` block.
///
/// Exact two-way within transform for balanced blocks.
pub fn demean_twoway_values(values: &[f64], n: usize, t: usize) -> Vec<f64> {
    assert_eq!(values.len(), n * t, "block shape mismatch");
    let rm = region_means(values, n, t);
    let ym = year_means(values, n, t);
    let grand = rm.iter().sum::<f64>() / n as f64;
    values.iter().enumerate().map(|(idx, &x)| x - rm[idx / t] - ym[idx % t] + grand).collect()
}

pub fn demean_twoway(panel: &Panel, var: &str) -> Result<Vec<f64>> {
    Ok(demean_twoway_values(panel.variable(var)?, panel.n_regions(), panel.n_years()))
}

pub fn demean_region(panel: &Panel, var: &str) -> Result<Vec<f64>> {
    Ok(demean_region_values(panel.variable(var)?, panel.n_regions(), panel.n_years()))
}

pub fn lag(panel: &Panel, var: &str, k: usize) -> Result<Grid> {
    panel.grid(var)?.lag(k)
}

pub fn first_difference(panel: &Panel, var: &str) -> Result<Grid> {
    panel.grid(var)?.diff()
}

pub fn interact(panel: &Panel, var_a: &str, var_b: &str) -> Result<Grid> {
    Ok(panel.grid(var_a)?.product(&panel.grid(var_b)?))
}

/// True when `var` takes a single value within every region.
pub fn is_region_constant(panel: &Panel, var: &str) -> Result<bool> {
    let t = panel.n_years();
    let values = panel.variable(var)?;
    Ok(values.chunks(t).all(|row| row.iter().all(|&v| v == row[0])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Log1,
    Lag(usize),
    Diff,
    DemeanRegion,
    DemeanTwoway,
    Interact { with: String },
}

/// Declarative `source -> target` transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub source: String,
    pub target: String,
    pub kind: TransformKind,
}

impl TransformSpec {
    pub fn new(source: impl Into<String>, target: impl Into<String>, kind: TransformKind) -> Self {
        Self { source: source.into(), target: target.into(), kind }
    }

    /// Evaluates the transform without touching the panel.
    pub fn evaluate(&self, panel: &Panel) -> Result<Grid> {
        let (n, t) = (panel.n_regions(), panel.n_years());
        match &self.kind {
            TransformKind::Log1 => Ok(Grid::from_values(n, t, &log1_variable(panel, &self.source)?)),
            TransformKind::Lag(k) => lag(panel, &self.source, *k),
            TransformKind::Diff => first_difference(panel, &self.source),
            TransformKind::DemeanRegion => Ok(Grid::from_values(n, t, &demean_region(panel, &self.source)?)),
            TransformKind::DemeanTwoway => Ok(Grid::from_values(n, t, &demean_twoway(panel, &self.source)?)),
            TransformKind::Interact { with } => interact(panel, &self.source, with),
        }
    }

    /// Evaluates and stores the result as `target`; fails if any cell is unavailable.
    pub fn apply(&self, panel: &Panel) -> Result<Panel> {
        let grid = self.evaluate(panel)?;
        panel.with_grid(&self.target, &grid)
    }
}
