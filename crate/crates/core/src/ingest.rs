//! Panel CSV I/O and zonal aggregation of pixel grids into loss and emission
//! panels.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{build_panel, log1, Balanced, Observation, Panel};

pub const LOSS: &str = "L";
pub const EMISSIONS: &str = "E";
pub const LOG_LOSS: &str = "l";
pub const LOG_EMISSIONS: &str = "e";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub id: u64,
    pub region: String,
    /// Carbon density, Mg C per hectare.
    pub biomass: f64,
    /// Hectares.
    pub area: f64,
    /// Percent canopy cover in `[0, 100]`.
    pub canopy: f64,
}

/// Pixels with their region assignment and the year (if any) each was lost.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    pixels: Vec<Pixel>,
    loss: BTreeMap<u64, i32>,
}

impl PixelGrid {
    /// Validates and sorts pixels by id. A pixel may be lost at most once.
    pub fn new(mut pixels: Vec<Pixel>, events: impl IntoIterator<Item = (u64, i32)>) -> Result<Self> {
        pixels.sort_by_key(|p| p.id);
        if let Some(w) = pixels.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidConfig(format!("duplicate pixel id {}", w[0].id)));
        }
        for p in &pixels {
            if !(p.biomass >= 0.0 && p.biomass.is_finite()) {
                return Err(Error::InvalidConfig(format!("pixel {}: biomass must be >= 0", p.id)));
            }
            if !(p.area > 0.0 && p.area.is_finite()) {
                return Err(Error::InvalidConfig(format!("pixel {}: area must be > 0", p.id)));
            }
            if !(0.0..=100.0).contains(&p.canopy) {
                return Err(Error::InvalidConfig(format!("pixel {}: canopy must lie in [0, 100]", p.id)));
            }
        }
        let mut loss = BTreeMap::new();
        for (id, year) in events {
            if pixels.binary_search_by_key(&id, |p| p.id).is_err() {
                return Err(Error::InvalidConfig(format!("loss event for unknown pixel {id}")));
            }
            if let Some(prev) = loss.insert(id, year) {
                return Err(Error::InvalidConfig(format!("pixel {id} lost twice ({prev} and {year})")));
            }
        }
        Ok(Self { pixels, loss })
    }

    pub fn pixels(&self) -> &[Pixel] {
        &self.pixels
    }

    pub fn loss_year(&self, id: u64) -> Option<i32> {
        self.loss.get(&id).copied()
    }

    pub fn loss_events(&self) -> impl Iterator<Item = (u64, i32)> + '_ {
        self.loss.iter().map(|(&id, &y)| (id, y))
    }

    pub fn n_events(&self) -> usize {
        self.loss.len()
    }

    /// Distinct region ids in sorted order.
    pub fn regions(&self) -> Vec<String> {
        self.pixels.iter().map(|p| p.region.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Carbon-to-CO₂e conversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionFactors {
    pub theta: f64,
}

impl EmissionFactors {
    /// Molecular mass ratio CO₂ / C.
    pub const CO2_PER_C: f64 = 44.0 / 12.0;

    pub fn new(theta: f64) -> Result<Self> {
        if !(theta >= 0.0 && theta.is_finite()) {
            return Err(Error::InvalidConfig(format!("theta must be a nonnegative finite number, got {theta}")));
        }
        Ok(Self { theta })
    }
}

impl Default for EmissionFactors {
    fn default() -> Self {
        Self { theta: Self::CO2_PER_C }
    }
}

/// Keeps pixels with `canopy >= threshold`, and only their loss events.
pub fn filter_canopy(grid: &PixelGrid, threshold: f64) -> Result<PixelGrid> {
    if !(0.0..=100.0).contains(&threshold) {
        return Err(Error::InvalidConfig(format!("canopy threshold must lie in [0, 100], got {threshold}")));
    }
    let pixels: Vec<Pixel> = grid.pixels.iter().filter(|p| p.canopy >= threshold).cloned().collect();
    let loss = grid
        .loss
        .iter()
        .filter(|(id, _)| pixels.binary_search_by_key(id, |p| &p.id).is_ok())
        .map(|(&id, &y)| (id, y))
        .collect();
    Ok(PixelGrid { pixels, loss })
}

/// Sums `weight(pixel)` over lost pixels per (region, year). Events outside
/// `years` are ignored; cells with no event are 0.
fn zonal_sum(grid: &PixelGrid, years: &[i32], var: &str, weight: impl Fn(&Pixel) -> f64) -> Result<Panel> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("pixel grid is empty".into()));
    }
    if years.is_empty() {
        return Err(Error::InvalidConfig("no years requested".into()));
    }
    let regions = grid.regions();
    let index: HashMap<&str, usize> = regions.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let t = years.len();
    let mut values = vec![0.0; regions.len() * t];
    // Pixel-id order fixes the summation order within each cell.
    for p in &grid.pixels {
        let Some(year) = grid.loss_year(p.id) else { continue };
        let Some(s) = years.iter().position(|&y| y == year) else { continue };
        values[index[p.region.as_str()] * t + s] += weight(p);
    }
    let mut vars = BTreeMap::new();
    vars.insert(var.to_string(), values);
    Panel::new(regions, years.to_vec(), vars)
}

/// `L_it = Σ_{p∈i} area_p · 1[p lost in t]` (hectares), as variable `L`.
pub fn aggregate_loss(grid: &PixelGrid, years: &[i32]) -> Result<Panel> {
    zonal_sum(grid, years, LOSS, |p| p.area)
}

/// `E_it = Σ_{p∈i} 1[p lost in t] · B_p · area_p · θ`, as variable `E`.
pub fn aggregate_emissions(grid: &PixelGrid, factors: &EmissionFactors, years: &[i32]) -> Result<Panel> {
    let theta = factors.theta;
    zonal_sum(grid, years, EMISSIONS, |p| p.biomass * p.area * theta)
}

/// Loss and emission levels plus their `log1` transforms (`L`, `E`, `l`, `e`).
pub fn build_loss_emission_panel(grid: &PixelGrid, factors: &EmissionFactors, years: &[i32]) -> Result<Panel> {
    let loss = aggregate_loss(grid, years)?;
    let emissions = aggregate_emissions(grid, factors, years)?;
    let with_e = loss.with_variable(EMISSIONS, emissions.variable(EMISSIONS)?.to_vec())?;
    let l: Vec<f64> = with_e.variable(LOSS)?.iter().map(|&v| log1(v)).collect::<Result<_>>()?;
    let e: Vec<f64> = with_e.variable(EMISSIONS)?.iter().map(|&v| log1(v)).collect::<Result<_>>()?;
    with_e.with_variable(LOG_LOSS, l)?.with_variable(LOG_EMISSIONS, e)
}

fn csv_line(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

/// Reads `region,year,<var>...` rows and balances them via [`build_panel`].
pub fn read_panel_csv<R: Read>(reader: R) -> Result<Balanced> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    if headers.len() < 2 || &headers[0] != "region" || &headers[1] != "year" {
        return Err(Error::Parse { line: 1, message: "header must start with `region,year`".into() });
    }
    let vars: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    if let Some(dup) = vars.iter().enumerate().find(|(i, v)| vars[..*i].contains(v)) {
        return Err(Error::Parse { line: 1, message: format!("duplicate column `{}`", dup.1) });
    }

    let mut seen: HashMap<(String, i32), u64> = HashMap::new();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = csv_line(&record);
        let region = record[0].to_string();
        let year: i32 = record[1]
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("malformed year `{}`", &record[1]) })?;
        if let Some(first) = seen.insert((region.clone(), year), line) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate row for ({region}, {year}); first seen on line {first}"),
            });
        }
        for (j, var) in vars.iter().enumerate() {
            let raw = &record[j + 2];
            if raw.is_empty() {
                continue;
            }
            let value: f64 = raw
                .parse()
                .map_err(|_| Error::Parse { line, message: format!("malformed number `{raw}` in column `{var}`") })?;
            if !value.is_finite() {
                return Err(Error::Parse { line, message: format!("non-finite value in column `{var}`") });
            }
            rows.push(Observation::new(region.clone(), year, var.clone(), value));
        }
    }
    build_panel(rows)
}

pub fn load_panel_csv(path: impl AsRef<Path>) -> Result<Balanced> {
    read_panel_csv(File::open(path)?)
}

/// Writes one row per (region, year); values use the shortest representation
/// that parses back to the same `f64`.
pub fn write_panel_csv<W: Write>(panel: &Panel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let names: Vec<&str> = panel.variable_names().collect();
    let mut header = vec!["region", "year"];
    header.extend(&names);
    w.write_record(&header).map_err(csv_io)?;
    let columns: Vec<&[f64]> = names.iter().map(|n| panel.variable(n)).collect::<Result<_>>()?;
    let t = panel.n_years();
    for (i, region) in panel.regions().iter().enumerate() {
        for (s, year) in panel.years().iter().enumerate() {
            let mut rec = vec![region.clone(), year.to_string()];
            rec.extend(columns.iter().map(|c| format!("{:?}", c[i * t + s])));
            w.write_record(&rec).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_panel_csv(panel: &Panel, path: impl AsRef<Path>) -> Result<()> {
    write_panel_csv(panel, File::create(path)?)
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[derive(Debug, Deserialize, Serialize)]
struct PixelRow {
    pixel: u64,
    region: String,
    biomass: f64,
    area: f64,
    canopy: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct EventRow {
    pixel: u64,
    year: i32,
}

fn read_rows<T: for<'de> Deserialize<'de>, R: Read>(reader: R) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e| Error::Parse { line: e.position().map_or(0, |p| p.line()), message: e.to_string() })
        })
        .collect()
}

/// Reads `pixels.csv` (`pixel,region,biomass,area,canopy`) and
/// `loss_events.csv` (`pixel,year`).
pub fn read_pixel_grid<R1: Read, R2: Read>(pixels: R1, events: R2) -> Result<PixelGrid> {
    let pixel_rows: Vec<PixelRow> = read_rows(pixels)?;
    let event_rows: Vec<EventRow> = read_rows(events)?;
    let pixels = pixel_rows
        .into_iter()
        .map(|r| Pixel { id: r.pixel, region: r.region, biomass: r.biomass, area: r.area, canopy: r.canopy })
        .collect();
    PixelGrid::new(pixels, event_rows.into_iter().map(|r| (r.pixel, r.year)))
}

pub fn load_pixel_grid(pixels: impl AsRef<Path>, events: impl AsRef<Path>) -> Result<PixelGrid> {
    read_pixel_grid(File::open(pixels)?, File::open(events)?)
}

pub fn write_pixel_grid<W1: Write, W2: Write>(grid: &PixelGrid, pixels: W1, events: W2) -> Result<()> {
    let mut pw = csv::Writer::from_writer(pixels);
    for p in grid.pixels() {
        pw.serialize(PixelRow { pixel: p.id, region: p.region.clone(), biomass: p.biomass, area: p.area, canopy: p.canopy })
            .map_err(csv_io)?;
    }
    pw.flush()?;
    let mut ew = csv::Writer::from_writer(events);
    for (pixel, year) in grid.loss_events() {
        ew.serialize(EventRow { pixel, year }).map_err(csv_io)?;
    }
    ew.flush()?;
    Ok(())
}

/// Table-1-style description of one variable over all `N·T` cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator).
    pub std: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    /// Moment skewness; 0 for constant data.
    pub skewness: f64,
}

pub fn describe(values: &[f64]) -> Result<SummaryStats> {
    if values.is_empty() {
        return Err(Error::InsufficientData("no values to summarize".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let std = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    let m2 = ss / n as f64;
    let skewness = if m2 > 0.0 {
        values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n as f64 / m2.powf(1.5)
    } else {
        0.0
    };
    Ok(SummaryStats { n, mean, std, min: sorted[0], median, max: sorted[n - 1], skewness })
}

pub fn summary_stats(panel: &Panel, var: &str) -> Result<SummaryStats> {
    describe(panel.variable(var)?)
}

/// Summary statistics of every variable, keyed by name.
pub fn summary_table(panel: &Panel) -> Result<BTreeMap<String, SummaryStats>> {
    panel.variable_names().map(|v| Ok((v.to_string(), summary_stats(panel, v)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn px(id: u64, region: &str, biomass: f64, area: f64, canopy: f64) -> Pixel {
        Pixel { id, region: region.into(), biomass, area, canopy }
    }

    #[test]
    fn canopy_filter_is_inclusive() {
        let g = PixelGrid::new(
            vec![px(1, "A", 1.0, 1.0, 25.0), px(2, "A", 1.0, 1.0, 30.0), px(3, "A", 1.0, 1.0, 80.0)],
            vec![(1, 2001), (2, 2001)],
        )
        .unwrap();
        let f = filter_canopy(&g, 30.0).unwrap();
        assert_eq!(f.pixels().iter().map(|p| p.id).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(f.loss_events().collect::<Vec<_>>(), vec![(2, 2001)]);
        assert_eq!(filter_canopy(&g, 0.0).unwrap(), g);
        let low = PixelGrid::new(vec![px(1, "A", 1.0, 1.0, 20.0), px(2, "B", 1.0, 1.0, 20.0)], vec![]).unwrap();
        assert!(filter_canopy(&low, 30.0).unwrap().is_empty());
        assert!(filter_canopy(&g, 101.0).is_err());
    }

    #[test]
    fn loss_aggregation_examples() {
        let g = PixelGrid::new(
            vec![px(1, "A", 5.0, 0.09, 50.0), px(2, "A", 5.0, 0.09, 50.0), px(3, "B", 5.0, 0.09, 50.0)],
            vec![(1, 2005), (2, 2005)],
        )
        .unwrap();
        let l = aggregate_loss(&g, &[2004, 2005]).unwrap();
        assert!((l.value(LOSS, 0, 1).unwrap() - 0.18).abs() < 1e-15);
        assert_eq!(l.value(LOSS, 1, 1).unwrap(), 0.0);
        assert_eq!(l.value(LOSS, 0, 0).unwrap(), 0.0);

        let none = PixelGrid::new(vec![px(1, "A", 5.0, 0.09, 50.0)], vec![]).unwrap();
        assert!(aggregate_loss(&none, &[2001, 2002]).unwrap().variable(LOSS).unwrap().iter().all(|v| *v == 0.0));
        assert!(aggregate_loss(&PixelGrid::new(vec![], vec![]).unwrap(), &[2001]).is_err());
    }

    #[test]
    fn emission_examples() {
        let g = PixelGrid::new(
            vec![px(1, "A", 10.0, 1.0, 50.0), px(2, "A", 20.0, 1.0, 50.0), px(3, "A", 30.0, 1.0, 50.0)],
            vec![(1, 2001), (3, 2001)],
        )
        .unwrap();
        let e = aggregate_emissions(&g, &EmissionFactors::new(1.0).unwrap(), &[2001]).unwrap();
        assert_eq!(e.value(EMISSIONS, 0, 0).unwrap(), 40.0);
        let zero = aggregate_emissions(&g, &EmissionFactors::new(0.0).unwrap(), &[2001]).unwrap();
        assert_eq!(zero.value(EMISSIONS, 0, 0).unwrap(), 0.0);

        let two = PixelGrid::new(vec![px(1, "A", 100.0, 1.0, 50.0), px(2, "A", 50.0, 1.0, 50.0)], vec![(1, 2001), (2, 2001)])
            .unwrap();
        let co2 = aggregate_emissions(&two, &EmissionFactors::default(), &[2001]).unwrap();
        assert!((co2.value(EMISSIONS, 0, 0).unwrap() - 550.0).abs() < 1e-10);
        assert!(EmissionFactors::new(-1.0).is_err());
    }

    #[test]
    fn grid_invariants_enforced() {
        assert!(PixelGrid::new(vec![px(1, "A", -1.0, 1.0, 50.0)], vec![]).is_err());
        assert!(PixelGrid::new(vec![px(1, "A", 1.0, 0.0, 50.0)], vec![]).is_err());
        assert!(PixelGrid::new(vec![px(1, "A", 1.0, 1.0, 50.0)], vec![(1, 2001), (1, 2002)]).is_err());
        assert!(PixelGrid::new(vec![px(1, "A", 1.0, 1.0, 50.0)], vec![(2, 2001)]).is_err());
        assert!(PixelGrid::new(vec![px(1, "A", 1.0, 1.0, 50.0), px(1, "B", 1.0, 1.0, 50.0)], vec![]).is_err());
    }

    #[test]
    fn csv_load_examples() {
        let ok = "region,year,L,E\nA,2001,1,2\nA,2002,3,4\nB,2001,5,6\nB,2002,7,8\n";
        let b = read_panel_csv(ok.as_bytes()).unwrap();
        assert_eq!((b.panel.n_regions(), b.panel.n_years()), (2, 2));
        assert_eq!(b.panel.value("E", 1, 1).unwrap(), 8.0);

        let dup = "region,year,L\nA,2001,1\nA,2001,2\n";
        match read_panel_csv(dup.as_bytes()).unwrap_err() {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("duplicate"));
            }
            other => panic!("unexpected {other}"),
        }

        let gap = "region,year,L\nA,2001,1\nA,2002,2\nC,2001,3\nB,2001,4\nB,2002,5\n";
        let b = read_panel_csv(gap.as_bytes()).unwrap();
        assert_eq!(b.dropped, vec!["C".to_string()]);
        assert_eq!(b.panel.regions(), &["A".to_string(), "B".to_string()]);

        let bad = "region,year,L\nA,2001,abc\n";
        assert!(matches!(read_panel_csv(bad.as_bytes()), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(read_panel_csv("id,year,L\nA,2001,1\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
        assert!(read_panel_csv("".as_bytes()).is_err());
    }

    #[test]
    fn pixel_csv_round_trip() {
        let g = PixelGrid::new(vec![px(1, "A", 10.5, 0.09, 35.0), px(2, "B", 20.0, 0.09, 90.0)], vec![(2, 2003)]).unwrap();
        let (mut p, mut e) = (Vec::new(), Vec::new());
        write_pixel_grid(&g, &mut p, &mut e).unwrap();
        assert_eq!(read_pixel_grid(p.as_slice(), e.as_slice()).unwrap(), g);
    }

    #[test]
    fn summary_examples() {
        let s = describe(&[4.0; 5]).unwrap();
        assert_eq!((s.mean, s.std, s.min, s.median, s.max), (4.0, 0.0, 4.0, 4.0, 4.0));
        assert_eq!(describe(&[0.0, 75.0, 100.0]).unwrap().median, 75.0);
        let s = describe(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.std - 1.29099).abs() < 1e-5);
        assert_eq!((s.min, s.median, s.max), (1.0, 2.5, 4.0));
    }

    fn arb_grid() -> impl Strategy<Value = PixelGrid> {
        proptest::collection::vec((0usize..3, 0.0f64..300.0, 0.01f64..2.0, 0.0f64..100.0, proptest::option::of(2001i32..2005)), 1..40)
            .prop_map(|rows| {
                let pixels: Vec<Pixel> = rows
                    .iter()
                    .enumerate()
                    .map(|(id, (r, b, a, c, _))| px(id as u64, ["A", "B", "C"][*r], *b, *a, *c))
                    .collect();
                let events: Vec<(u64, i32)> =
                    rows.iter().enumerate().filter_map(|(id, row)| row.4.map(|y| (id as u64, y))).collect();
                PixelGrid::new(pixels, events).unwrap()
            })
    }

    fn cell(p: &Panel, var: &str, region: &str, s: usize) -> f64 {
        p.regions().iter().position(|r| r == region).map_or(0.0, |i| p.value(var, i, s).unwrap())
    }

    proptest! {
        #[test]
        fn emissions_are_additive_and_scale_with_theta(g in arb_grid(), split in 0u64..40, c in 0.1f64..10.0) {
            let years = [2001, 2002, 2003, 2004];
            let f = EmissionFactors::default();
            let full = aggregate_emissions(&g, &f, &years).unwrap();
            let part = |keep: &dyn Fn(u64) -> bool| {
                let pixels: Vec<Pixel> = g.pixels().iter().filter(|p| keep(p.id)).cloned().collect();
                let events: Vec<(u64, i32)> = g.loss_events().filter(|(id, _)| keep(*id)).collect();
                PixelGrid::new(pixels, events).unwrap()
            };
            let (a, b) = (part(&|id| id < split), part(&|id| id >= split));
            let ea = (!a.is_empty()).then(|| aggregate_emissions(&a, &f, &years).unwrap());
            let eb = (!b.is_empty()).then(|| aggregate_emissions(&b, &f, &years).unwrap());
            let scaled = aggregate_emissions(&g, &EmissionFactors::new(f.theta * c).unwrap(), &years).unwrap();
            let loss = aggregate_loss(&g, &years).unwrap();
            for region in full.regions() {
                for s in 0..years.len() {
                    let whole = cell(&full, EMISSIONS, region, s);
                    let sum = ea.as_ref().map_or(0.0, |p| cell(p, EMISSIONS, region, s))
                        + eb.as_ref().map_or(0.0, |p| cell(p, EMISSIONS, region, s));
                    prop_assert!((whole - sum).abs() <= 1e-10 * whole.abs().max(1.0));
                    prop_assert!((cell(&scaled, EMISSIONS, region, s) - c * whole).abs() <= 1e-10 * whole.abs().max(1.0));
                    if whole > 0.0 {
                        prop_assert!(cell(&loss, LOSS, region, s) > 0.0);
                    }
                }
            }
        }

        #[test]
        fn panel_csv_round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 6)) {
            let mut vars = BTreeMap::new();
            vars.insert("x".to_string(), vals);
            let p = Panel::new(vec!["A".into(), "B".into()], vec![2001, 2002, 2003], vars).unwrap();
            let mut buf = Vec::new();
            write_panel_csv(&p, &mut buf).unwrap();
            let back = read_panel_csv(buf.as_slice()).unwrap().panel;
            prop_assert_eq!(back, p);
        }
    }
}
