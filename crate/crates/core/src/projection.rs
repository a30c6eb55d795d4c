//! Linear-spline dose response and annual sleep-loss projection on gridded
//! climate scenarios.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::cos_deg;
use crate::panel_engine::{fit, FitOptions, FitResult, Panel};

pub const KNOTS: [f64; 2] = [-20.0, 10.0];
pub const SPLINE_NAMES: [&str; 3] = ["spline_t", "spline_t_plus20", "spline_t_minus10"];
pub const DAYS_PER_YEAR: usize = 365;
pub const BASELINE_YEAR: i32 = 2010;

/// Truncated-power basis `(t, max(0, t + 20), max(0, t - 10))`.
pub fn spline_basis(t: f64) -> [f64; 3] {
    [t, (t - KNOTS[0]).max(0.0), (t - KNOTS[1]).max(0.0)]
}

/// Spline coefficients on the truncated-power basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineModel {
    pub coef: [f64; 3],
    pub vcov: [[f64; 3]; 3],
}

impl SplineModel {
    /// Model with the given slopes on `(-inf, -20)`, `[-20, 10)`, `[10, inf)`.
    pub fn from_segment_slopes(s: [f64; 3]) -> Self {
        SplineModel {
            coef: [s[0], s[1] - s[0], s[2] - s[1]],
            vcov: [[0.0; 3]; 3],
        }
    }

    /// A basis column dropped as collinear (no data beyond its knot) gets a
    /// zero coefficient, so the neighbouring slope carries on past the knot.
    pub fn from_fit(fit: &FitResult) -> Result<Self> {
        let idx: Vec<Option<usize>> = SPLINE_NAMES
            .iter()
            .map(|n| match fit.index(n) {
                Some(i) => Ok(Some(i)),
                None if fit.dropped_collinear.iter().any(|d| d == n) => Ok(None),
                None => Err(Error::Validation(format!("fit has no `{n}` coefficient"))),
            })
            .collect::<Result<_>>()?;
        if idx.iter().all(Option::is_none) {
            return Err(Error::Validation("every spline column was dropped".into()));
        }
        let mut m = SplineModel {
            coef: [0.0; 3],
            vcov: [[0.0; 3]; 3],
        };
        for a in 0..3 {
            let Some(i) = idx[a] else { continue };
            m.coef[a] = fit.beta[i];
            for b in 0..3 {
                if let Some(j) = idx[b] {
                    m.vcov[a][b] = fit.vcov[i][j];
                }
            }
        }
        Ok(m)
    }

    /// Fitted value up to an additive constant.
    pub fn predict(&self, t: f64) -> f64 {
        let b = spline_basis(t);
        self.coef[0] * b[0] + self.coef[1] * b[1] + self.coef[2] * b[2]
    }

    pub fn segment_slopes(&self) -> [f64; 3] {
        let c = self.coef;
        [c[0], c[0] + c[1], c[0] + c[1] + c[2]]
    }

    /// Standard errors of the three segment slopes.
    pub fn segment_slope_se(&self) -> [f64; 3] {
        let v = &self.vcov;
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for a in 0..=k {
                for b in 0..=k {
                    s += v[a][b];
                }
            }
            *o = s.max(0.0).sqrt();
        }
        out
    }
}

/// `f(t_future) - f(t_base)` in minutes. Computed basis-wise, so swapping the
/// arguments flips the sign exactly.
pub fn predict_delta(model: &SplineModel, t_future: f64, t_base: f64) -> f64 {
    let f = spline_basis(t_future);
    let b = spline_basis(t_base);
    (0..3).map(|k| model.coef[k] * (f[k] - b[k])).sum()
}

/// Replace the `tmin` column of a linear-treatment panel with the spline basis
/// and fit.
pub fn fit_spline(panel: &Panel, tmin_column: &str, opts: &FitOptions) -> Result<(SplineModel, FitResult)> {
    let j = panel
        .names
        .iter()
        .position(|n| n == tmin_column)
        .ok_or_else(|| Error::Validation(format!("panel has no `{tmin_column}` column")))?;
    let mut p = panel.clone();
    let t = p.x.remove(j);
    p.names.remove(j);
    let basis: Vec<[f64; 3]> = t.iter().map(|&v| spline_basis(v)).collect();
    for (k, name) in SPLINE_NAMES.iter().enumerate().rev() {
        p.x.insert(j, basis.iter().map(|b| b[k]).collect());
        p.names.insert(j, name.to_string());
    }
    let f = fit(&p, opts)?;
    Ok((SplineModel::from_fit(&f)?, f))
}

/// Day of year on a 365-day calendar. In leap years day 60 (Feb 29) maps to
/// `None` and later days shift down by one.
pub fn noleap_day(year: i32, doy: u32) -> Option<u32> {
    let leap = chrono::NaiveDate::from_ymd_opt(year, 2, 29).is_some();
    match (leap, doy) {
        (_, 0) => None,
        (false, d) if d <= 365 => Some(d),
        (true, 60) => None,
        (true, d) if d < 60 => Some(d),
        (true, d) if d <= 366 => Some(d - 1),
        _ => None,
    }
}

/// Sleep hours lost over a year: `-sum(delta) / 60`, pairing day `d` of the
/// scenario with day `d` of the baseline. Both series are indexed by noleap
/// day minus one.
pub fn annual_loss(future: &[Option<f64>], base: &[Option<f64>], model: &SplineModel) -> std::result::Result<f64, Vec<u32>> {
    let mut gaps = Vec::new();
    let mut total = 0.0;
    for d in 0..DAYS_PER_YEAR {
        match (future.get(d).copied().flatten(), base.get(d).copied().flatten()) {
            (Some(f), Some(b)) => total += predict_delta(model, f, b),
            _ => gaps.push(d as u32 + 1),
        }
    }
    if gaps.is_empty() {
        // written as a subtraction so zero warming gives +0.0, not -0.0
        Ok(0.0 - total / 60.0)
    } else {
        Err(gaps)
    }
}

/// `sum(cos(lat) * v) / sum(cos(lat))`, accumulated as offsets from the first
/// value so a constant field comes back exactly.
pub fn equal_area_average(cells: &[(f64, f64)]) -> Result<f64> {
    let (_, v0) = *cells
        .first()
        .ok_or_else(|| Error::Validation("equal-area average of no cells".into()))?;
    let mut num = 0.0;
    let mut den = 0.0;
    for &(lat, v) in cells {
        let w = cos_deg(lat);
        num += w * (v - v0);
        den += w;
    }
    if !(den > 0.0) {
        return Err(Error::Numerical("cell weights sum to zero".into()));
    }
    Ok(v0 + num / den)
}

/// Daily minimum temperatures for one grid cell, by noleap day.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSeries {
    pub lat: f64,
    pub lon: f64,
    pub tmin: Vec<Option<f64>>,
}

/// One model's scenario for one year.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioGrid {
    pub model: String,
    pub year: i32,
    /// Sorted by `(lat, lon)`.
    pub cells: Vec<CellSeries>,
}

fn cell_cmp(a: (f64, f64), b: (f64, f64)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1))
}

impl ScenarioGrid {
    fn geometry(&self) -> Vec<(f64, f64)> {
        self.cells.iter().map(|c| (c.lat, c.lon)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub year: Option<i32>,
    pub lat: f64,
    pub lon: f64,
    pub doy: u32,
    pub tmin_c: f64,
}

/// Group `scenario_grid.csv` rows into per-(model, year) grids. Rows without
/// model or year take `default_model` / `default_year`.
pub fn scenario_grids(rows: Vec<ScenarioRow>, default_model: Option<&str>, default_year: Option<i32>) -> Result<Vec<ScenarioGrid>> {
    let mut by: BTreeMap<(String, i32), BTreeMap<(u64, u64), CellSeries>> = BTreeMap::new();
    for (i, r) in rows.into_iter().enumerate() {
        let model = r
            .model
            .or_else(|| default_model.map(str::to_string))
            .ok_or_else(|| Error::Validation(format!("scenario row {i} has no model")))?;
        let year = r
            .year
            .or(default_year)
            .ok_or_else(|| Error::Validation(format!("scenario row {i} has no year")))?;
        if !r.tmin_c.is_finite() || !crate::geo::LatLon::new(r.lat, r.lon).is_valid() {
            return Err(Error::Validation(format!("scenario row {i} has invalid values")));
        }
        let Some(day) = noleap_day(year, r.doy) else {
            if r.doy == 60 && noleap_day(year, 61).is_some() {
                continue; // Feb 29
            }
            return Err(Error::Validation(format!("scenario row {i}: day {} out of range for {year}", r.doy)));
        };
        let cell = by
            .entry((model, year))
            .or_default()
            .entry((r.lat.to_bits(), r.lon.to_bits()))
            .or_insert_with(|| CellSeries {
                lat: r.lat,
                lon: r.lon,
                tmin: vec![None; DAYS_PER_YEAR],
            });
        let slot = &mut cell.tmin[day as usize - 1];
        if slot.is_some() {
            return Err(Error::Validation(format!(
                "scenario row {i}: duplicate day {} at ({}, {})",
                r.doy, r.lat, r.lon
            )));
        }
        *slot = Some(r.tmin_c);
    }
    Ok(by
        .into_iter()
        .map(|((model, year), cells)| {
            let mut cells: Vec<CellSeries> = cells.into_values().collect();
            cells.sort_by(|a, b| cell_cmp((a.lat, a.lon), (b.lat, b.lon)));
            ScenarioGrid { model, year, cells }
        })
        .collect())
}

pub fn read_scenario_csv<R: Read>(reader: R, source: &str) -> Result<Vec<ScenarioRow>> {
    Ok(crate::io::read_rows::<ScenarioRow, _>(reader, source)?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}

/// Write grids in long form: `model, year, lat, lon, doy, tmin_c`, with
/// noleap day numbers.
pub fn write_scenario_csv<W: Write>(writer: W, grids: &[ScenarioGrid]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model", "year", "lat", "lon", "doy", "tmin_c"])?;
    for g in grids {
        for c in &g.cells {
            for (d, t) in c.tmin.iter().enumerate() {
                if let Some(t) = t {
                    w.write_record([
                        g.model.clone(),
                        g.year.to_string(),
                        c.lat.to_string(),
                        c.lon.to_string(),
                        (d + 1).to_string(),
                        t.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-cell annual loss for one model and scenario year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossGrid {
    pub model: String,
    pub year: i32,
    /// `(lat, lon, loss_hours)` sorted by `(lat, lon)`.
    pub cells: Vec<(f64, f64, f64)>,
}

impl LossGrid {
    pub fn global(&self) -> Result<f64> {
        equal_area_average(&self.cells.iter().map(|c| (c.0, c.2)).collect::<Vec<_>>())
    }
}

/// Loss in each cell of `scenario` relative to the same model's `baseline`.
pub fn project_grid(model: &SplineModel, scenario: &ScenarioGrid, baseline: &ScenarioGrid) -> Result<LossGrid> {
    if scenario.geometry() != baseline.geometry() {
        return Err(Error::GeometryMismatch(format!(
            "{} {} and baseline {} differ in cells",
            scenario.model, scenario.year, baseline.year
        )));
    }
    let cells = scenario
        .cells
        .par_iter()
        .zip(baseline.cells.par_iter())
        .map(|(f, b)| {
            annual_loss(&f.tmin, &b.tmin, model)
                .map(|loss| (f.lat, f.lon, loss))
                .map_err(|days| Error::MissingDays {
                    lat: f.lat,
                    lon: f.lon,
                    days,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossGrid {
        model: scenario.model.clone(),
        year: scenario.year,
        cells,
    })
}

/// Project every non-baseline grid against its model's baseline-year grid.
pub fn project_all(model: &SplineModel, grids: &[ScenarioGrid], baseline_year: i32) -> Result<Vec<LossGrid>> {
    let base: HashMap<&str, &ScenarioGrid> = grids
        .iter()
        .filter(|g| g.year == baseline_year)
        .map(|g| (g.model.as_str(), g))
        .collect();
    grids
        .iter()
        .map(|g| {
            let b = base
                .get(g.model.as_str())
                .ok_or_else(|| Error::Validation(format!("model `{}` has no {baseline_year} baseline", g.model)))?;
            project_grid(model, g, b)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCell {
    pub lat: f64,
    pub lon: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub year: i32,
    pub n_models: usize,
    pub cells: Vec<EnsembleCell>,
    /// Equal-area global loss per model, sorted by model name.
    pub model_globals: Vec<(String, f64)>,
}

fn shifted_mean(values: &[f64]) -> f64 {
    let v0 = values[0];
    let s: f64 = values.iter().map(|v| v - v0).sum();
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    (v0 + s / values.len() as f64).clamp(lo, hi)
}

/// Cell-wise mean across models for one year. Models are processed in name
/// order, so the result does not depend on input order.
pub fn ensemble_aggregate(grids: &[LossGrid]) -> Result<Ensemble> {
    let mut sorted: Vec<&LossGrid> = grids.iter().collect();
    sorted.sort_by(|a, b| a.model.cmp(&b.model));
    let first = *sorted.first().ok_or_else(|| Error::Validation("no model grids to aggregate".into()))?;
    for g in &sorted {
        if g.year != first.year {
            return Err(Error::Validation(format!("mixed years {} and {}", first.year, g.year)));
        }
        let same = g.cells.len() == first.cells.len()
            && g.cells.iter().zip(&first.cells).all(|(a, b)| a.0 == b.0 && a.1 == b.1);
        if !same {
            return Err(Error::GeometryMismatch(format!("model `{}` differs from `{}`", g.model, first.model)));
        }
    }
    let cells = (0..first.cells.len())
        .map(|i| {
            let vals: Vec<f64> = sorted.iter().map(|g| g.cells[i].2).collect();
            EnsembleCell {
                lat: first.cells[i].0,
                lon: first.cells[i].1,
                mean: shifted_mean(&vals),
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let model_globals = sorted
        .iter()
        .map(|g| Ok((g.model.clone(), g.global()?)))
        .collect::<Result<_>>()?;
    Ok(Ensemble {
        year: first.year,
        n_models: sorted.len(),
        cells,
        model_globals,
    })
}

/// Per-country loss for one year: equal-area average over each country's
/// cells per model, then the mean across models. Countries with no cells in
/// the grid are skipped with a warning.
pub fn country_aggregate(grids: &[LossGrid], mask: &BTreeMap<String, Vec<(f64, f64)>>) -> Result<BTreeMap<String, f64>> {
    let mut sorted: Vec<&LossGrid> = grids.iter().collect();
    sorted.sort_by(|a, b| a.model.cmp(&b.model));
    let mut out = BTreeMap::new();
    for (iso, cells) in mask {
        let mut per_model = Vec::new();
        for g in &sorted {
            let lookup: HashMap<(u64, u64), (f64, f64)> =
                g.cells.iter().map(|c| ((c.0.to_bits(), c.1.to_bits()), (c.0, c.2))).collect();
            let vals: Vec<(f64, f64)> = cells
                .iter()
                .filter_map(|c| lookup.get(&(c.0.to_bits(), c.1.to_bits())).copied())
                .collect();
            if vals.is_empty() {
                continue;
            }
            per_model.push(equal_area_average(&vals)?);
        }
        if per_model.is_empty() {
            log::warn!("country `{iso}` has no cells in the projection grid; skipped");
            continue;
        }
        out.insert(iso.clone(), shifted_mean(&per_model));
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct MaskRow {
    lat: f64,
    lon: f64,
    iso3: String,
}

/// `country_mask.csv`: `lat, lon, iso3`, one country per cell.
pub fn read_country_mask<R: Read>(reader: R, source: &str) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    let mut seen: HashMap<(u64, u64), String> = HashMap::new();
    let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (line, r) in crate::io::read_rows::<MaskRow, _>(reader, source)? {
        if let Some(prev) = seen.insert((r.lat.to_bits(), r.lon.to_bits()), r.iso3.clone()) {
            return Err(Error::Schema {
                path: source.to_string(),
                line,
                message: format!("cell ({}, {}) already assigned to {prev}", r.lat, r.lon),
            });
        }
        out.entry(r.iso3).or_default().push((r.lat, r.lon));
    }
    Ok(out)
}

pub fn write_projection_csv<W: Write>(writer: W, grids: &[LossGrid]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lat", "lon", "model", "year", "loss_hours"])?;
    for g in grids {
        for c in &g.cells {
            w.write_record([c.0.to_string(), c.1.to_string(), g.model.clone(), g.year.to_string(), c.2.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ProjectionRow {
    lat: f64,
    lon: f64,
    model: String,
    year: i32,
    loss_hours: f64,
}

pub fn read_projection_csv<R: Read>(reader: R, source: &str) -> Result<Vec<LossGrid>> {
    let mut by: BTreeMap<(String, i32), Vec<(f64, f64, f64)>> = BTreeMap::new();
    for (_, r) in crate::io::read_rows::<ProjectionRow, _>(reader, source)? {
        by.entry((r.model, r.year)).or_default().push((r.lat, r.lon, r.loss_hours));
    }
    Ok(by
        .into_iter()
        .map(|((model, year), mut cells)| {
            cells.sort_by(|a, b| cell_cmp((a.0, a.1), (b.0, b.1)));
            LossGrid { model, year, cells }
        })
        .collect())
}

pub fn write_ensemble_csv<W: Write>(writer: W, ensembles: &[Ensemble]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lat", "lon", "year", "n_models", "mean_loss_hours", "min_loss_hours", "max_loss_hours"])?;
    for e in ensembles {
        for c in &e.cells {
            w.write_record([
                c.lat.to_string(),
                c.lon.to_string(),
                e.year.to_string(),
                e.n_models.to_string(),
                c.mean.to_string(),
                c.min.to_string(),
                c.max.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_country_csv<W: Write>(writer: W, rows: &[(String, i32, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iso3", "year", "loss_hours"])?;
    for (iso, year, v) in rows {
        w.write_record([iso.clone(), year.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
