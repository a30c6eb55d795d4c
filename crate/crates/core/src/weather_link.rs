//! Nighttime weather exposures for person-nights.
//!
//! Daily station values are combined by inverse great-circle distance within a
//! search radius; reanalysis-style variables (wind, cloud, humidity) come from
//! a regular grid by nearest cell. Climate normals average the same lookups
//! over 1981–2010 in a ±7-day window around the calendar day.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use chrono::{Datelike, Duration, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::LatLon;
pub use crate::geo::haversine_km;
use crate::io::{opt_f64, read_rows};
use crate::sleep_ingest::SleepRecord;

pub const DEFAULT_RADIUS_KM: f64 = 100.0;
pub const NORMAL_WINDOW_DAYS: i64 = 7;
pub const NORMAL_FIRST_YEAR: i32 = 1981;
pub const NORMAL_LAST_YEAR: i32 = 2010;

/// Stored exposure values are snapped to multiples of 2^-20 so that
/// `anomaly + normal == tmin` holds bit for bit.
const QUANTUM: f64 = 1_048_576.0;

pub(crate) fn quantize(x: f64) -> f64 {
    (x * QUANTUM).round() / QUANTUM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationDay {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub date: NaiveDate,
    #[serde(rename = "tmin_c", deserialize_with = "opt_f64::deserialize")]
    pub tmin: Option<f64>,
    #[serde(rename = "tmax_c", deserialize_with = "opt_f64::deserialize")]
    pub tmax: Option<f64>,
    #[serde(rename = "prcp_cm", deserialize_with = "opt_f64::deserialize")]
    pub prcp: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationVar {
    Tmin,
    Tmax,
    Prcp,
    /// `tmax - tmin` at a station, only where both are present.
    DiurnalRange,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct StationObs {
    tmin: Option<f64>,
    tmax: Option<f64>,
    prcp: Option<f64>,
}

impl StationObs {
    fn get(&self, var: StationVar) -> Option<f64> {
        match var {
            StationVar::Tmin => self.tmin,
            StationVar::Tmax => self.tmax,
            StationVar::Prcp => self.prcp,
            StationVar::DiurnalRange => Some(self.tmax? - self.tmin?),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Station {
    pub id: String,
    pub location: LatLon,
}

/// Station archive with a latitude-band spatial index. Built once and shared
/// read-only across lookups.
#[derive(Debug, Clone)]
pub struct StationArchive {
    stations: Vec<Station>,
    obs: Vec<HashMap<NaiveDate, StationObs>>,
    bands: BTreeMap<i32, Vec<usize>>,
}

impl StationArchive {
    pub fn from_days(days: Vec<StationDay>) -> Result<Self> {
        let mut by_id: BTreeMap<String, (LatLon, HashMap<NaiveDate, StationObs>)> = BTreeMap::new();
        for d in days {
            let loc = LatLon::new(d.lat, d.lon);
            if !loc.is_valid() {
                return Err(Error::Validation(format!("station {} has invalid coordinates ({}, {})", d.station_id, d.lat, d.lon)));
            }
            if let (Some(lo), Some(hi)) = (d.tmin, d.tmax) {
                if lo > hi {
                    return Err(Error::Validation(format!("station {} on {}: tmin {lo} > tmax {hi}", d.station_id, d.date)));
                }
            }
            let entry = by_id.entry(d.station_id.clone()).or_insert_with(|| (loc, HashMap::new()));
            if entry.0 != loc {
                return Err(Error::Validation(format!("station {} reported at two locations", d.station_id)));
            }
            entry.1.insert(
                d.date,
                StationObs {
                    tmin: d.tmin,
                    tmax: d.tmax,
                    prcp: d.prcp,
                },
            );
        }
        let mut stations = Vec::with_capacity(by_id.len());
        let mut obs = Vec::with_capacity(by_id.len());
        let mut bands: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, (id, (loc, o))) in by_id.into_iter().enumerate() {
            bands.entry(loc.lat.floor() as i32).or_default().push(i);
            stations.push(Station { id, location: loc });
            obs.push(o);
        }
        Ok(StationArchive { stations, obs, bands })
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    /// Stations within `radius_km` of `point`, ordered by station id.
    pub fn nearby(&self, point: LatLon, radius_km: f64) -> Nearby {
        let dlat = radius_km / (crate::geo::EARTH_RADIUS_KM * std::f64::consts::PI / 180.0) + 1e-9;
        let lo = (point.lat - dlat).floor() as i32;
        let hi = (point.lat + dlat).floor() as i32;
        let mut hits: Vec<(usize, f64)> = self
            .bands
            .range(lo..=hi)
            .flat_map(|(_, idx)| idx.iter().copied())
            .filter_map(|i| {
                let d = haversine_km(point, self.stations[i].location);
                (d <= radius_km).then_some((i, d))
            })
            .collect();
        hits.sort_by_key(|&(i, _)| i);
        Nearby { hits }
    }

    fn value(&self, station: usize, date: NaiveDate, var: StationVar) -> Option<f64> {
        self.obs[station].get(&date)?.get(var)
    }
}

/// Candidate stations for one location, with their distances.
#[derive(Debug, Clone, PartialEq)]
pub struct Nearby {
    hits: Vec<(usize, f64)>,
}

impl Nearby {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn value(&self, archive: &StationArchive, date: NaiveDate, var: StationVar) -> Option<f64> {
        let pairs: Vec<(f64, f64)> = self
            .hits
            .iter()
            .filter_map(|&(i, d)| archive.value(i, date, var).map(|v| (d, v)))
            .collect();
        inverse_distance_average(&pairs)
    }
}

/// Weight for a station at `dist_km`; the 1 km floor bounds the singularity.
pub fn proximity_weight(dist_km: f64) -> f64 {
    1.0 / dist_km.max(1.0)
}

/// `Σ w v / Σ w` over `(distance, value)` pairs with `w = 1/max(d, 1)`.
pub fn inverse_distance_average(pairs: &[(f64, f64)]) -> Option<f64> {
    let (_, v0) = *pairs.first()?;
    let mut wsum = 0.0;
    let mut acc = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &(d, v) in pairs {
        let w = proximity_weight(d);
        wsum += w;
        acc += w * (v - v0);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Some((v0 + acc / wsum).clamp(lo, hi))
}

/// Proximity-weighted station value at `point`, or `None` when no station
/// within the radius reports the variable on `date`.
pub fn match_stations(point: LatLon, archive: &StationArchive, date: NaiveDate, var: StationVar, radius_km: f64) -> Option<f64> {
    assert!(radius_km > 0.0, "radius_km must be positive");
    archive.nearby(point, radius_km).value(archive, date, var)
}

fn is_leap(year: i32) -> bool {
    NaiveDate::from_ymd_opt(year, 2, 29).is_some()
}

/// 0-based day of a 365-day year, with Feb 29 folded into Feb 28.
pub fn noleap_doy(date: NaiveDate) -> u32 {
    let d = date.ordinal0();
    if is_leap(date.year()) && d >= 59 {
        d - 1
    } else {
        d
    }
}

fn noleap_date(year: i32, doy: u32) -> NaiveDate {
    let jan1 = NaiveDate::from_ymd_opt(year, 1, 1).expect("valid year");
    let shift = if is_leap(year) && doy >= 59 { 1 } else { 0 };
    jan1 + Duration::days((doy + shift) as i64)
}

/// A day of the 365-day calendar (Feb 29 maps onto Feb 28).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CalendarDay(pub u32);

impl CalendarDay {
    pub fn of(date: NaiveDate) -> Self {
        CalendarDay(noleap_doy(date))
    }

    pub fn from_month_day(month: u32, day: u32) -> Option<Self> {
        let (m, d) = if (month, day) == (2, 29) { (2, 28) } else { (month, day) };
        NaiveDate::from_ymd_opt(2001, m, d).map(CalendarDay::of)
    }
}

/// Mean of `lookup` over 1981–2010 for every date within ±7 days of the
/// calendar day. Feb 29 observations count toward Feb 28.
pub fn climate_normal_with<F>(day: CalendarDay, lookup: F) -> Option<f64>
where
    F: Fn(NaiveDate) -> Option<f64>,
{
    let mut sum = 0.0;
    let mut n = 0usize;
    for year in NORMAL_FIRST_YEAR..=NORMAL_LAST_YEAR {
        for k in -NORMAL_WINDOW_DAYS..=NORMAL_WINDOW_DAYS {
            let idx = day.0 as i64 + k;
            let y = year + idx.div_euclid(365) as i32;
            if !(NORMAL_FIRST_YEAR..=NORMAL_LAST_YEAR).contains(&y) {
                continue;
            }
            let date = noleap_date(y, idx.rem_euclid(365) as u32);
            let mut take = |d: NaiveDate| {
                if let Some(v) = lookup(d) {
                    sum += v;
                    n += 1;
                }
            };
            take(date);
            if date.month() == 2 && date.day() == 28 && is_leap(y) {
                take(date + Duration::days(1));
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Station-based climate normal using the same radius as daily matching.
pub fn climate_normal(point: LatLon, day: CalendarDay, archive: &StationArchive, var: StationVar, radius_km: f64) -> Option<f64> {
    let near = archive.nearby(point, radius_km);
    if near.is_empty() {
        return None;
    }
    climate_normal_with(day, |d| near.value(archive, d, var))
}

/// NWS heat index in °C from air temperature (°C) and relative humidity (%).
///
/// Below 80 °F the simple Steadman-style formula is returned; at or above it,
/// the Rothfusz regression with the low- and high-humidity adjustments.
pub fn heat_index(temp_c: f64, rh: f64) -> f64 {
    let t = temp_c * 9.0 / 5.0 + 32.0;
    let hi_f = if t < 80.0 {
        0.5 * (t + 61.0 + (t - 68.0) * 1.2 + rh * 0.094)
    } else {
        let mut hi = -42.379 + 2.049_015_23 * t + 10.143_331_27 * rh
            - 0.224_755_41 * t * rh
            - 0.006_837_83 * t * t
            - 0.054_817_17 * rh * rh
            + 0.001_228_74 * t * t * rh
            + 0.000_852_82 * t * rh * rh
            - 0.000_001_99 * t * t * rh * rh;
        if rh < 13.0 && t <= 112.0 {
            hi -= ((13.0 - rh) / 4.0) * ((17.0 - (t - 95.0).abs()) / 17.0).sqrt();
        } else if rh > 85.0 && t <= 87.0 {
            hi += ((rh - 85.0) / 10.0) * ((87.0 - t) / 5.0);
        }
        hi
    };
    (hi_f - 32.0) * 5.0 / 9.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDay {
    pub lat: f64,
    pub lon: f64,
    pub date: NaiveDate,
    #[serde(rename = "tmin_c", default, deserialize_with = "opt_f64::deserialize")]
    pub tmin: Option<f64>,
    #[serde(rename = "wind_ms", default, deserialize_with = "opt_f64::deserialize")]
    pub wind: Option<f64>,
    #[serde(rename = "cloud_pct", default, deserialize_with = "opt_f64::deserialize")]
    pub cloud: Option<f64>,
    #[serde(rename = "rh_pct", default, deserialize_with = "opt_f64::deserialize")]
    pub rh: Option<f64>,
    #[serde(rename = "tmax_c", default, deserialize_with = "opt_f64::deserialize")]
    pub tmax: Option<f64>,
    #[serde(rename = "prcp_cm", default, deserialize_with = "opt_f64::deserialize")]
    pub prcp: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridVar {
    Tmin,
    Tmax,
    Prcp,
    DiurnalRange,
    Wind,
    Cloud,
    Rh,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct GridObs {
    tmin: Option<f64>,
    tmax: Option<f64>,
    prcp: Option<f64>,
    wind: Option<f64>,
    cloud: Option<f64>,
    rh: Option<f64>,
}

impl GridObs {
    fn get(&self, var: GridVar) -> Option<f64> {
        match var {
            GridVar::Tmin => self.tmin,
            GridVar::Tmax => self.tmax,
            GridVar::Prcp => self.prcp,
            GridVar::DiurnalRange => Some(self.tmax? - self.tmin?),
            GridVar::Wind => self.wind,
            GridVar::Cloud => self.cloud,
            GridVar::Rh => self.rh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Axis {
    origin: f64,
    step: Option<f64>,
}

impl Axis {
    fn infer(values: &[f64], what: &str) -> Result<Self> {
        let mut v: Vec<f64> = values.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        let origin = v[0];
        let step = v.windows(2).map(|w| w[1] - w[0]).fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))));
        if let Some(s) = step {
            for x in &v {
                let k = (x - origin) / s;
                if (k - k.round()).abs() > 1e-6 {
                    return Err(Error::Validation(format!("grid {what} spacing is not uniform (value {x}, step {s})")));
                }
            }
        }
        Ok(Axis { origin, step })
    }

    fn index(&self, x: f64) -> i64 {
        match self.step {
            Some(s) => ((x - self.origin) / s).round() as i64,
            None => 0,
        }
    }
}

/// Regular lat/lon grid (possibly sparse: only cells that appear in the input
/// are stored). Lookup is by nearest cell center.
#[derive(Debug, Clone)]
pub struct GridArchive {
    lat: Axis,
    lon: Axis,
    cells: HashMap<(i64, i64), HashMap<NaiveDate, GridObs>>,
}

impl GridArchive {
    pub fn from_days(days: Vec<GridDay>) -> Result<Self> {
        if days.is_empty() {
            return Err(Error::Validation("grid input is empty".into()));
        }
        let lats: Vec<f64> = days.iter().map(|d| d.lat).collect();
        let lons: Vec<f64> = days.iter().map(|d| d.lon).collect();
        let lat = Axis::infer(&lats, "latitude")?;
        let lon = Axis::infer(&lons, "longitude")?;
        let mut cells: HashMap<(i64, i64), HashMap<NaiveDate, GridObs>> = HashMap::new();
        for d in days {
            for (name, v, lo, hi) in [("cloud_pct", d.cloud, 0.0, 100.0), ("rh_pct", d.rh, 0.0, 100.0)] {
                if let Some(v) = v {
                    if !(lo..=hi).contains(&v) {
                        return Err(Error::Validation(format!("grid cell ({}, {}) on {}: {name} {v} outside [0, 100]", d.lat, d.lon, d.date)));
                    }
                }
            }
            cells.entry((lat.index(d.lat), lon.index(d.lon))).or_default().insert(
                d.date,
                GridObs {
                    tmin: d.tmin,
                    tmax: d.tmax,
                    prcp: d.prcp,
                    wind: d.wind,
                    cloud: d.cloud,
                    rh: d.rh,
                },
            );
        }
        Ok(GridArchive { lat, lon, cells })
    }

    fn cell_of(&self, point: LatLon) -> (i64, i64) {
        (self.lat.index(point.lat), self.lon.index(point.lon))
    }

    pub fn value(&self, point: LatLon, date: NaiveDate, var: GridVar) -> Option<f64> {
        self.cells.get(&self.cell_of(point))?.get(&date)?.get(var)
    }

    pub fn has_var(&self, var: GridVar) -> bool {
        self.cells.values().any(|c| c.values().any(|o| o.get(var).is_some()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureSource {
    #[default]
    Station,
    Grid,
}

/// The six weather variables attached to every person-night.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeatherVar {
    Tmin,
    DiurnalRange,
    Prcp,
    Wind,
    Cloud,
    Rh,
}

impl WeatherVar {
    pub const ALL: [WeatherVar; 6] = [
        WeatherVar::Tmin,
        WeatherVar::DiurnalRange,
        WeatherVar::Prcp,
        WeatherVar::Wind,
        WeatherVar::Cloud,
        WeatherVar::Rh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeatherVar::Tmin => "tmin",
            WeatherVar::DiurnalRange => "dtr",
            WeatherVar::Prcp => "prcp",
            WeatherVar::Wind => "wind",
            WeatherVar::Cloud => "cloud",
            WeatherVar::Rh => "rh",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExposureConfig {
    pub source: ExposureSource,
    pub radius_km: f64,
}

impl Default for ExposureConfig {
    fn default() -> Self {
        ExposureConfig {
            source: ExposureSource::Station,
            radius_km: DEFAULT_RADIUS_KM,
        }
    }
}

/// Resolves one weather variable at a location on a date for a given source plan.
struct Resolver<'a> {
    stations: &'a StationArchive,
    grid: Option<&'a GridArchive>,
    config: ExposureConfig,
    grid_has_tmax: bool,
    grid_has_prcp: bool,
}

impl<'a> Resolver<'a> {
    fn new(stations: &'a StationArchive, grid: Option<&'a GridArchive>, config: ExposureConfig) -> Self {
        Resolver {
            stations,
            grid,
            config,
            grid_has_tmax: grid.map_or(false, |g| g.has_var(GridVar::Tmax)),
            grid_has_prcp: grid.map_or(false, |g| g.has_var(GridVar::Prcp)),
        }
    }

    fn lookup(&self, var: WeatherVar, point: LatLon, near: &Nearby) -> Box<dyn Fn(NaiveDate) -> Option<f64> + Send + Sync + '_> {
        let from_grid = |gv: GridVar| -> Box<dyn Fn(NaiveDate) -> Option<f64> + Send + Sync + '_> {
            match self.grid {
                Some(g) => Box::new(move |d| g.value(point, d, gv)),
                None => Box::new(|_| None),
            }
        };
        let from_station = |sv: StationVar| -> Box<dyn Fn(NaiveDate) -> Option<f64> + Send + Sync + '_> {
            let near = near.clone();
            Box::new(move |d| near.value(self.stations, d, sv))
        };
        let grid = self.config.source == ExposureSource::Grid;
        match var {
            WeatherVar::Tmin if grid => from_grid(GridVar::Tmin),
            WeatherVar::Tmin => from_station(StationVar::Tmin),
            WeatherVar::DiurnalRange if grid && self.grid_has_tmax => from_grid(GridVar::DiurnalRange),
            WeatherVar::DiurnalRange if grid => {
                let tmax = from_station(StationVar::Tmax);
                let tmin = from_grid(GridVar::Tmin);
                Box::new(move |d| Some(tmax(d)? - tmin(d)?))
            }
            WeatherVar::DiurnalRange => {
                let tmax = from_station(StationVar::Tmax);
                let tmin = from_station(StationVar::Tmin);
                Box::new(move |d| Some(tmax(d)? - tmin(d)?))
            }
            WeatherVar::Prcp if grid && self.grid_has_prcp => from_grid(GridVar::Prcp),
            WeatherVar::Prcp => from_station(StationVar::Prcp),
            WeatherVar::Wind => from_grid(GridVar::Wind),
            WeatherVar::Cloud => from_grid(GridVar::Cloud),
            WeatherVar::Rh => from_grid(GridVar::Rh),
        }
    }
}

/// Precomputed climate normals keyed by location and calendar day.
#[derive(Debug, Clone, Default)]
pub struct NormalsTable {
    values: HashMap<(u64, u64, CalendarDay), [Option<f64>; 6]>,
}

fn loc_key(p: LatLon) -> (u64, u64) {
    (p.lat.to_bits(), p.lon.to_bits())
}

impl NormalsTable {
    /// Compute normals for every `(location, calendar day)` pair requested.
    pub fn build(
        requests: &[(LatLon, CalendarDay)],
        stations: &StationArchive,
        grid: Option<&GridArchive>,
        config: ExposureConfig,
    ) -> Self {
        let resolver = Resolver::new(stations, grid, config);
        let mut uniq: Vec<(LatLon, CalendarDay)> = Vec::new();
        let mut seen = HashSet::new();
        for &(p, d) in requests {
            if seen.insert((loc_key(p), d)) {
                uniq.push((p, d));
            }
        }
        let mut near_cache: HashMap<(u64, u64), Nearby> = HashMap::new();
        for (p, _) in &uniq {
            near_cache
                .entry(loc_key(*p))
                .or_insert_with(|| stations.nearby(*p, config.radius_km));
        }
        let values = uniq
            .par_iter()
            .map(|&(p, day)| {
                let near = &near_cache[&loc_key(p)];
                let mut out = [None; 6];
                for (slot, var) in out.iter_mut().zip(WeatherVar::ALL) {
                    let f = resolver.lookup(var, p, near);
                    *slot = climate_normal_with(day, f);
                }
                ((loc_key(p).0, loc_key(p).1, day), out)
            })
            .collect();
        NormalsTable { values }
    }

    pub fn get(&self, point: LatLon, day: CalendarDay, var: WeatherVar) -> Option<f64> {
        let (a, b) = loc_key(point);
        self.values.get(&(a, b, day))?[var as usize]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Weather exposure for one person-night.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exposure {
    pub user_id: String,
    pub night_date: NaiveDate,
    pub values: [Option<f64>; 6],
    pub normals: [Option<f64>; 6],
    pub tmin_anomaly: Option<f64>,
    pub heat_index: Option<f64>,
}

impl Exposure {
    pub fn get(&self, var: WeatherVar) -> Option<f64> {
        self.values[var as usize]
    }

    pub fn normal(&self, var: WeatherVar) -> Option<f64> {
        self.normals[var as usize]
    }

    /// True when every core covariate and normal is present.
    pub fn is_complete(&self) -> bool {
        self.values.iter().chain(self.normals.iter()).all(Option::is_some)
    }

    pub fn missing(&self) -> Vec<String> {
        let mut out = Vec::new();
        for v in WeatherVar::ALL {
            if self.get(v).is_none() {
                out.push(v.name().to_string());
            }
            if self.normal(v).is_none() {
                out.push(format!("{}_normal", v.name()));
            }
        }
        out
    }
}

/// Attach exposures to each record. Weather for a night is taken from the
/// observation dated `night_date` (the evening the night starts).
pub fn assemble_exposures(
    records: &[SleepRecord],
    sites: &HashMap<String, LatLon>,
    stations: &StationArchive,
    grid: Option<&GridArchive>,
    normals: &NormalsTable,
    config: ExposureConfig,
) -> Result<Vec<Exposure>> {
    let resolver = Resolver::new(stations, grid, config);
    let mut near_cache: HashMap<(u64, u64), Nearby> = HashMap::new();
    for r in records {
        let p = *sites
            .get(&r.user_id)
            .ok_or_else(|| Error::Validation(format!("user `{}` has no location", r.user_id)))?;
        near_cache
            .entry(loc_key(p))
            .or_insert_with(|| stations.nearby(p, config.radius_km));
    }
    Ok(records
        .par_iter()
        .map(|r| {
            let p = sites[&r.user_id];
            let near = &near_cache[&loc_key(p)];
            let day = CalendarDay::of(r.night_date);
            let mut values = [None; 6];
            let mut norms = [None; 6];
            for var in WeatherVar::ALL {
                values[var as usize] = resolver.lookup(var, p, near)(r.night_date).map(quantize);
                norms[var as usize] = normals.get(p, day, var).map(quantize);
            }
            let tmin = values[WeatherVar::Tmin as usize];
            let tmin_anomaly = match (tmin, norms[WeatherVar::Tmin as usize]) {
                (Some(t), Some(n)) => Some(t - n),
                _ => None,
            };
            let heat_index = match (tmin, values[WeatherVar::Rh as usize]) {
                (Some(t), Some(h)) => Some(quantize(heat_index(t, h))),
                _ => None,
            };
            Exposure {
                user_id: r.user_id.clone(),
                night_date: r.night_date,
                values,
                normals: norms,
                tmin_anomaly,
                heat_index,
            }
        })
        .collect())
}

/// The `(location, calendar day)` pairs whose normals `assemble_exposures` will need.
pub fn normal_requests(records: &[SleepRecord], sites: &HashMap<String, LatLon>) -> Vec<(LatLon, CalendarDay)> {
    let mut out: Vec<(LatLon, CalendarDay)> = records
        .iter()
        .filter_map(|r| sites.get(&r.user_id).map(|p| (*p, CalendarDay::of(r.night_date))))
        .collect();
    out.sort_by(|a, b| {
        a.0.lat
            .total_cmp(&b.0.lat)
            .then(a.0.lon.total_cmp(&b.0.lon))
            .then(a.1.cmp(&b.1))
    });
    out.dedup();
    out
}

pub fn write_stations_csv<W: Write>(writer: W, rows: &[StationDay]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_grid_csv<W: Write>(writer: W, rows: &[GridDay]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_stations_csv<R: Read>(reader: R, source: &str) -> Result<Vec<StationDay>> {
    Ok(read_rows::<StationDay, _>(reader, source)?.into_iter().map(|(_, r)| r).collect())
}

pub fn read_grid_csv<R: Read>(reader: R, source: &str) -> Result<Vec<GridDay>> {
    Ok(read_rows::<GridDay, _>(reader, source)?.into_iter().map(|(_, r)| r).collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_exposures_csv<W: Write>(writer: W, rows: &[Exposure]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["user_id".to_string(), "night_date".to_string()];
    for v in WeatherVar::ALL {
        header.push(v.name().to_string());
    }
    for v in WeatherVar::ALL {
        header.push(format!("{}_normal", v.name()));
    }
    header.push("tmin_anomaly".into());
    header.push("heat_index".into());
    w.write_record(&header)?;
    for e in rows {
        let mut rec = vec![e.user_id.clone(), e.night_date.to_string()];
        rec.extend(e.values.iter().map(|v| fmt_opt(*v)));
        rec.extend(e.normals.iter().map(|v| fmt_opt(*v)));
        rec.push(fmt_opt(e.tmin_anomaly));
        rec.push(fmt_opt(e.heat_index));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_exposures_csv<R: Read>(reader: R, source: &str) -> Result<Vec<Exposure>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| crate::io::schema_err(source, &e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |m: String| Error::Schema {
            path: source.to_string(),
            line,
            message: m,
        };
        if rec.len() != 16 {
            return Err(bad(format!("expected 16 columns, got {}", rec.len())));
        }
        let num = |i: usize| -> Result<Option<f64>> {
            let s = rec[i].trim();
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|e| bad(format!("column {i}: {e}")))
            }
        };
        let mut values = [None; 6];
        let mut normals = [None; 6];
        for k in 0..6 {
            values[k] = num(2 + k)?;
            normals[k] = num(8 + k)?;
        }
        out.push(Exposure {
            user_id: rec[0].to_string(),
            night_date: rec[1].parse().map_err(|e| bad(format!("night_date: {e}")))?,
            values,
            normals,
            tmin_anomaly: num(14)?,
            heat_index: num(15)?,
        });
    }
    Ok(out)
}
