//! Seeded synthetic worlds with a known temperature effect on sleep.
//!
//! [`generate`] produces the raw inputs the pipeline consumes (epochs,
//! stations, grid, users). [`synth_panel`] skips epochs and weather files and
//! draws a regression panel directly, which is what the recovery checks use
//! at larger sizes.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use chrono::{DateTime, Datelike, Duration, FixedOffset, NaiveDate, NaiveTime, TimeZone};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::LatLon;
use crate::panel_engine::{FeDim, Panel};
use crate::response_models::{season_of, Season, UserInfo};
use crate::sleep_ingest::{Epoch, EpochStream, SleepState};
use crate::weather_link::{quantize, GridDay, StationArchive, StationDay, StationVar, DEFAULT_RADIUS_KM};

/// Ground-truth effect of nightly minimum temperature on sleep minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Truth {
    Linear {
        slope: f64,
    },
    /// Slope `below` up to `knot`, `above` beyond it; continuous.
    Kinked {
        knot: f64,
        below: f64,
        above: f64,
    },
    /// Piecewise constant: `levels[i]` on bin `i` of the `[a, b)` edges.
    Binned {
        edges: Vec<f64>,
        levels: Vec<f64>,
    },
    /// Linear with a season-specific slope.
    Season {
        winter: f64,
        spring: f64,
        summer: f64,
        fall: f64,
    },
    /// Linear with a slope per user group.
    Group {
        slopes: BTreeMap<String, f64>,
    },
}

impl Default for Truth {
    fn default() -> Self {
        Truth::Linear { slope: -0.30 }
    }
}

impl Truth {
    pub fn kinked() -> Self {
        Truth::Kinked {
            knot: 10.0,
            below: 0.0,
            above: -0.45,
        }
    }

    pub fn validate(&self, groups: &[String]) -> Result<()> {
        match self {
            Truth::Binned { edges, levels } => {
                if levels.len() != edges.len() + 1 || edges.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Validation(
                        "binned truth needs ascending edges and one more level than edges".into(),
                    ));
                }
            }
            Truth::Group { slopes } => {
                if let Some(g) = groups.iter().find(|g| !slopes.contains_key(*g)) {
                    return Err(Error::Validation(format!("group truth has no slope for `{g}`")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Minutes added to sleep at temperature `t`.
    pub fn effect(&self, t: f64, season: Season, group: &str) -> f64 {
        match self {
            Truth::Linear { slope } => slope * t,
            Truth::Kinked { knot, below, above } => below * t + (above - below) * (t - knot).max(0.0),
            Truth::Binned { edges, levels } => levels[edges.partition_point(|&e| e <= t)],
            Truth::Season {
                winter,
                spring,
                summer,
                fall,
            } => {
                let s = match season {
                    Season::Winter => winter,
                    Season::Spring => spring,
                    Season::Summer => summer,
                    Season::Fall => fall,
                };
                s * t
            }
            Truth::Group { slopes } => slopes.get(group).copied().unwrap_or(0.0) * t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_admin1: usize,
    pub sites_per_admin1: usize,
    pub stations_per_admin1: usize,
    pub start_date: NaiveDate,
    pub n_days: u32,
    /// First year of station/grid history; history runs through 2010.
    pub history_start_year: i32,
    /// Users must be able to reach this many nights.
    pub min_nights: u32,
    pub night_prob: f64,
    pub base_duration_min: f64,
    pub noise_sd: f64,
    pub user_sd: f64,
    pub date_sd: f64,
    pub nap_prob: f64,
    pub wake_gap_prob: f64,
    pub grid_step_deg: f64,
    pub groups: Vec<String>,
    pub truth: Truth,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 40,
            n_admin1: 6,
            sites_per_admin1: 3,
            stations_per_admin1: 3,
            start_date: NaiveDate::from_ymd_opt(2016, 1, 1).expect("valid date"),
            n_days: 60,
            history_start_year: 1981,
            min_nights: 28,
            night_prob: 0.9,
            base_duration_min: 450.0,
            noise_sd: 25.0,
            user_sd: 30.0,
            date_sd: 8.0,
            nap_prob: 0.05,
            wake_gap_prob: 0.3,
            grid_step_deg: 0.25,
            groups: vec!["young".into(), "old".into()],
            truth: Truth::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if self.n_users == 0 || self.n_admin1 == 0 || self.sites_per_admin1 == 0 || self.stations_per_admin1 == 0 {
            return bad("counts of users, regions, sites and stations must be positive");
        }
        if self.n_days == 0 {
            return bad("n_days must be positive");
        }
        if self.min_nights > self.n_days {
            return Err(Error::Validation(format!(
                "min_nights ({}) exceeds the {} simulated days",
                self.min_nights, self.n_days
            )));
        }
        if !(self.night_prob > 0.0 && self.night_prob <= 1.0) {
            return bad("night_prob must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.nap_prob) || !(0.0..=1.0).contains(&self.wake_gap_prob) {
            return bad("probabilities must be in [0, 1]");
        }
        if !(1900..=2010).contains(&self.history_start_year) {
            return bad("history_start_year must be between 1900 and 2010");
        }
        if !(self.grid_step_deg > 0.0 && self.grid_step_deg <= 5.0) {
            return bad("grid_step_deg must be in (0, 5]");
        }
        if [self.noise_sd, self.user_sd, self.date_sd].iter().any(|s| !(*s >= 0.0)) {
            return bad("standard deviations must be non-negative");
        }
        if self.groups.is_empty() || self.groups.iter().any(String::is_empty) {
            return bad("groups must be non-empty labels");
        }
        self.truth.validate(&self.groups)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    pub utc_offset_h: i32,
    pub mean_tmin: f64,
    pub amplitude: f64,
}

/// Everything a synthetic run produces.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub epochs: Vec<EpochStream>,
    pub stations: Vec<StationDay>,
    pub grid: Vec<GridDay>,
    pub users: Vec<UserInfo>,
    pub truth: TruthDoc,
}

/// `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDoc {
    pub seed: u64,
    pub config: SynthConfig,
    pub regions: Vec<Region>,
    pub n_nights: usize,
    pub n_naps: usize,
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite non-negative sd")
}

fn seasonal(r: &Region, date: NaiveDate) -> f64 {
    let peak = if r.lat >= 0.0 { 200.0 } else { 17.0 };
    let doy = date.ordinal0() as f64;
    r.mean_tmin + r.amplitude * (2.0 * PI * (doy - peak) / 365.25).cos()
}

fn round_to(x: f64, step: f64) -> f64 {
    (x / step).round() * step
}

/// Round to 0.01 so CSV text is short and exact on re-read.
fn cents(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Generate a synthetic world from `seed`.
pub fn generate(config: &SynthConfig, seed: u64) -> Result<SynthWorld> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let regions: Vec<Region> = (0..config.n_admin1)
        .map(|i| {
            let north = i % 2 == 0;
            let abs_lat = if north { 30.0 + 20.0 * rng.random::<f64>() } else { 25.0 + 15.0 * rng.random::<f64>() };
            let lat = if north { abs_lat } else { -abs_lat };
            let lon = -150.0 + 300.0 * rng.random::<f64>();
            Region {
                name: format!("R{:02}", i + 1),
                lat: cents(lat),
                lon: cents(lon),
                utc_offset_h: (lon / 15.0).round() as i32,
                mean_tmin: 24.0 - 0.45 * abs_lat + normal(1.5).sample(&mut rng),
                amplitude: 3.0 + 0.15 * abs_lat,
            }
        })
        .collect();

    let jitter = |rng: &mut ChaCha20Rng, c: f64| cents(c + 0.5 * (rng.random::<f64>() - 0.5));
    let sites: Vec<(usize, LatLon)> = regions
        .iter()
        .enumerate()
        .flat_map(|(ri, r)| (0..config.sites_per_admin1).map(move |_| (ri, r)))
        .map(|(ri, r)| (ri, LatLon::new(jitter(&mut rng, r.lat), jitter(&mut rng, r.lon))))
        .collect();

    let study_end = config.start_date + Duration::days(config.n_days as i64);
    let mut dates: BTreeSet<NaiveDate> = BTreeSet::new();
    let mut d = NaiveDate::from_ymd_opt(config.history_start_year, 1, 1).expect("valid year");
    let hist_end = NaiveDate::from_ymd_opt(2010, 12, 31).expect("valid date");
    while d <= hist_end {
        dates.insert(d);
        d += Duration::days(1);
    }
    let mut d = config.start_date;
    while d <= study_end {
        dates.insert(d);
        d += Duration::days(1);
    }
    let dates: Vec<NaiveDate> = dates.into_iter().collect();

    // region-day temperature anomalies (AR(1)) shared by stations and grid cells
    let anomalies: Vec<Vec<f64>> = regions
        .iter()
        .map(|_| {
            let mut a = 0.0;
            let mut prev: Option<NaiveDate> = None;
            dates
                .iter()
                .map(|&day| {
                    let shock = normal(2.0).sample(&mut rng);
                    a = match prev {
                        Some(p) if day - p == Duration::days(1) => 0.7 * a + shock,
                        _ => shock,
                    };
                    prev = Some(day);
                    a
                })
                .collect()
        })
        .collect();

    let mut stations = Vec::new();
    let rain = Exp::new(1.0 / 0.6).expect("positive rate");
    for (ri, r) in regions.iter().enumerate() {
        for k in 0..config.stations_per_admin1 {
            let id = format!("{}S{:02}", r.name, k + 1);
            let (lat, lon) = (jitter(&mut rng, r.lat), jitter(&mut rng, r.lon));
            let offset = normal(0.8).sample(&mut rng);
            for (di, &day) in dates.iter().enumerate() {
                let tmin = cents(seasonal(r, day) + anomalies[ri][di] + offset + normal(0.5).sample(&mut rng));
                let dtr = (9.0 + normal(2.0).sample(&mut rng)).max(1.0);
                let prcp = if rng.random::<f64>() < 0.3 { rain.sample(&mut rng) } else { 0.0 };
                stations.push(StationDay {
                    station_id: id.clone(),
                    lat,
                    lon,
                    date: day,
                    tmin: Some(tmin),
                    tmax: Some(cents(tmin + dtr)),
                    prcp: Some(cents(prcp)),
                });
            }
        }
    }

    // grid cells only where sites fall, on a uniform lattice
    let step = config.grid_step_deg;
    let mut cells: Vec<(usize, f64, f64)> = sites
        .iter()
        .map(|(ri, p)| (*ri, round_to(p.lat, step), round_to(p.lon, step)))
        .collect();
    cells.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)));
    cells.dedup_by(|a, b| a.1 == b.1 && a.2 == b.2);
    let mut grid = Vec::new();
    for &(ri, lat, lon) in &cells {
        let wind0 = 3.0 + 2.0 * rng.random::<f64>();
        let rh0 = 55.0 + 20.0 * rng.random::<f64>();
        for (di, &day) in dates.iter().enumerate() {
            let a = anomalies[ri][di];
            grid.push(GridDay {
                lat,
                lon,
                date: day,
                tmin: Some(cents(seasonal(&regions[ri], day) + a + normal(0.5).sample(&mut rng))),
                wind: Some(cents((wind0 + normal(1.5).sample(&mut rng)).max(0.0))),
                cloud: Some(cents((50.0 + normal(25.0).sample(&mut rng)).clamp(0.0, 100.0))),
                rh: Some(cents((rh0 - 2.0 * a + normal(10.0).sample(&mut rng)).clamp(0.0, 100.0))),
                tmax: None,
                prcp: None,
            });
        }
    }

    // the temperature each night will be matched to, computed as the pipeline does
    let archive = StationArchive::from_days(stations.clone())?;
    let nearby: Vec<_> = sites.iter().map(|(_, p)| archive.nearby(*p, DEFAULT_RADIUS_KM)).collect();

    let date_effects: Vec<f64> = (0..=config.n_days).map(|_| normal(config.date_sd).sample(&mut rng)).collect();
    let n_sites = sites.len();
    let mut users = Vec::new();
    let mut epochs = Vec::new();
    let mut n_nights = 0;
    let mut n_naps = 0;
    for u in 0..config.n_users {
        let site = u % n_sites;
        let (ri, loc) = sites[site];
        let region = &regions[ri];
        let group = config.groups[rng.random_range(0..config.groups.len())].clone();
        let user_id = format!("U{:05}", u + 1);
        let mut attrs = BTreeMap::new();
        attrs.insert("group".to_string(), group.clone());
        users.push(UserInfo {
            user_id: user_id.clone(),
            lat: loc.lat,
            lon: loc.lon,
            admin1: region.name.clone(),
            attrs,
        });
        let tz = FixedOffset::east_opt(region.utc_offset_h * 3600).expect("offset within a day");
        let user_effect = normal(config.user_sd).sample(&mut rng);
        let mut stream = Vec::new();
        for day in 0..config.n_days {
            let night = config.start_date + Duration::days(day as i64);
            // draw everything up front so the random stream does not depend on weather gaps
            let present = rng.random::<f64>() < config.night_prob;
            let noise = normal(config.noise_sd).sample(&mut rng);
            let onset_jitter = normal(40.0).sample(&mut rng);
            let gap = if rng.random::<f64>() < config.wake_gap_prob { rng.random_range(5..=20) } else { 0 };
            let nap = if rng.random::<f64>() < config.nap_prob { rng.random_range(20..=60) } else { 0 };
            if !present {
                continue;
            }
            let Some(t) = nearby[site].value(&archive, night, StationVar::Tmin).map(quantize) else {
                continue;
            };
            let effect = config.truth.effect(t, season_of(night, loc.lat), &group);
            let dur = (config.base_duration_min + user_effect + date_effects[day as usize] + effect + noise)
                .round()
                .clamp(250.0, 700.0) as i64;
            let onset = (660.0 + onset_jitter).round().clamp(480.0, 880.0) as i64;
            let noon = tz
                .from_local_datetime(&night.and_time(NaiveTime::from_hms_opt(12, 0, 0).expect("noon")))
                .single()
                .expect("fixed offsets are unambiguous");
            let at = |m: i64| -> DateTime<FixedOffset> { noon + Duration::minutes(m) };
            let first = if gap > 0 { dur / 2 } else { dur };
            for m in onset..onset + first {
                stream.push(Epoch { timestamp: at(m), state: SleepState::Sleep });
            }
            if gap > 0 {
                stream.push(Epoch { timestamp: at(onset + first), state: SleepState::Wake });
                for m in onset + first + gap..onset + dur + gap {
                    stream.push(Epoch { timestamp: at(m), state: SleepState::Sleep });
                }
            }
            stream.push(Epoch { timestamp: at(onset + dur + gap), state: SleepState::Wake });
            if nap > 0 {
                // 17:00 the next day
                for m in 1740..1740 + nap {
                    stream.push(Epoch { timestamp: at(m), state: SleepState::Sleep });
                }
                stream.push(Epoch { timestamp: at(1740 + nap), state: SleepState::Wake });
                n_naps += 1;
            }
            n_nights += 1;
        }
        if !stream.is_empty() {
            epochs.push(EpochStream { user_id, epochs: stream });
        }
    }

    Ok(SynthWorld {
        epochs,
        stations,
        grid,
        users,
        truth: TruthDoc {
            seed,
            config: config.clone(),
            regions,
            n_nights,
            n_naps,
        },
    })
}

/// Settings for [`synth_panel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelSynthConfig {
    pub n_admin1: usize,
    pub users_per_admin1: usize,
    pub n_nights: u32,
    pub start_date: NaiveDate,
    pub noise_sd: f64,
    pub user_sd: f64,
    pub date_sd: f64,
    pub region_month_sd: f64,
    /// Outcome shock shared by all users of a region on a night.
    pub region_day_sd: f64,
    pub groups: Vec<String>,
    pub truth: Truth,
}

impl Default for PanelSynthConfig {
    fn default() -> Self {
        PanelSynthConfig {
            n_admin1: 40,
            users_per_admin1: 50,
            n_nights: 90,
            start_date: NaiveDate::from_ymd_opt(2016, 5, 1).expect("valid date"),
            noise_sd: 40.0,
            user_sd: 30.0,
            date_sd: 8.0,
            region_month_sd: 5.0,
            region_day_sd: 5.0,
            groups: vec!["a".into(), "b".into()],
            truth: Truth::default(),
        }
    }
}

/// A regression panel drawn directly from the generating process.
#[derive(Debug, Clone)]
pub struct SynthPanel {
    /// `y` is observed sleep minutes; the only regressor is `tmin`.
    pub panel: Panel,
    pub tmin: Vec<f64>,
    /// The temperature effect alone, without fixed effects or noise.
    pub signal: Vec<f64>,
    pub group: Vec<String>,
    pub season: Vec<Season>,
}

impl SynthPanel {
    /// Same rows, fixed effects and clusters with different regressors.
    pub fn with_regressors(&self, y: Vec<f64>, names: Vec<String>, x: Vec<Vec<f64>>) -> Result<Panel> {
        Panel::new(y, x, names, self.panel.fe.clone(), self.panel.cluster.clone())
    }
}

/// Draw a balanced panel: users nested in regions, every user observed every
/// night, fixed effects for user, date and region-by-month, clustered by region.
pub fn synth_panel(config: &PanelSynthConfig, seed: u64) -> Result<SynthPanel> {
    config.truth.validate(&config.groups)?;
    if config.n_admin1 < 2 || config.users_per_admin1 == 0 || config.n_nights == 0 {
        return Err(Error::Validation("panel needs at least 2 regions, 1 user and 1 night".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let nn = config.n_nights as usize;
    let dates: Vec<NaiveDate> = (0..nn).map(|d| config.start_date + Duration::days(d as i64)).collect();
    let date_fx: Vec<f64> = (0..nn).map(|_| normal(config.date_sd).sample(&mut rng)).collect();

    let n = config.n_admin1 * config.users_per_admin1 * nn;
    let mut y = Vec::with_capacity(n);
    let mut tmin = Vec::with_capacity(n);
    let mut signal = Vec::with_capacity(n);
    let mut group = Vec::with_capacity(n);
    let mut season = Vec::with_capacity(n);
    let mut fe_user = Vec::with_capacity(n);
    let mut fe_date = Vec::with_capacity(n);
    let mut fe_rm = Vec::with_capacity(n);
    let mut cluster = Vec::with_capacity(n);
    let months: Vec<u32> = {
        let first = dates[0].year() * 12 + dates[0].month0() as i32;
        dates.iter().map(|d| (d.year() * 12 + d.month0() as i32 - first) as u32).collect()
    };
    let n_months = months.last().copied().unwrap_or(0) + 1;

    for r in 0..config.n_admin1 {
        let north = r % 2 == 0;
        let abs_lat = 25.0 + 30.0 * rng.random::<f64>();
        let lat = if north { abs_lat } else { -abs_lat };
        let reg = Region {
            name: String::new(),
            lat,
            lon: 0.0,
            utc_offset_h: 0,
            mean_tmin: 24.0 - 0.45 * abs_lat + normal(2.0).sample(&mut rng),
            amplitude: 3.0 + 0.15 * abs_lat,
        };
        let rm_fx: Vec<f64> = (0..n_months).map(|_| normal(config.region_month_sd).sample(&mut rng)).collect();
        let mut a = 0.0;
        let region_days: Vec<(f64, f64)> = dates
            .iter()
            .map(|&d| {
                a = 0.7 * a + normal(2.5).sample(&mut rng);
                (seasonal(&reg, d) + a, normal(config.region_day_sd).sample(&mut rng))
            })
            .collect();
        for u in 0..config.users_per_admin1 {
            let uid = (r * config.users_per_admin1 + u) as u32;
            let g = config.groups[rng.random_range(0..config.groups.len())].clone();
            let u_fx = normal(config.user_sd).sample(&mut rng);
            let u_off = normal(1.0).sample(&mut rng);
            for (d, &date) in dates.iter().enumerate() {
                let t = region_days[d].0 + u_off + normal(1.5).sample(&mut rng);
                let s = season_of(date, lat);
                let f = config.truth.effect(t, s, &g);
                y.push(450.0 + u_fx + date_fx[d] + rm_fx[months[d] as usize] + region_days[d].1 + f + normal(config.noise_sd).sample(&mut rng));
                tmin.push(t);
                signal.push(f);
                group.push(g.clone());
                season.push(s);
                fe_user.push(uid);
                fe_date.push(d as u32);
                fe_rm.push(r as u32 * n_months + months[d]);
                cluster.push(r as u32);
            }
        }
    }
    let panel = Panel::new(
        y,
        vec![tmin.clone()],
        vec!["tmin".into()],
        vec![
            FeDim { name: "fe_user".into(), ids: fe_user },
            FeDim { name: "fe_date".into(), ids: fe_date },
            FeDim { name: "fe_adm1month".into(), ids: fe_rm },
        ],
        cluster,
    )?;
    Ok(SynthPanel {
        panel,
        tmin,
        signal,
        group,
        season,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sleep_ingest::{aggregate_all, ClockWindow, DEFAULT_BRIDGE_GAP_MIN};

    fn small() -> SynthConfig {
        SynthConfig {
            n_users: 6,
            n_admin1: 2,
            sites_per_admin1: 2,
            stations_per_admin1: 2,
            n_days: 30,
            history_start_year: 2009,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate(&small(), 1).unwrap();
        let b = generate(&small(), 1).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.stations, b.stations);
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.users, b.users);
        let c = generate(&small(), 2).unwrap();
        assert_ne!(a.stations, c.stations);
    }

    #[test]
    fn infeasible_configs() {
        let mut c = small();
        c.min_nights = 31;
        assert!(generate(&c, 1).is_err());
        let mut c = small();
        c.truth = Truth::Binned {
            edges: vec![0.0, 10.0],
            levels: vec![1.0],
        };
        assert!(generate(&c, 1).is_err());
    }

    #[test]
    fn epochs_aggregate_to_one_record_per_generated_night() {
        let w = generate(&small(), 7).unwrap();
        let recs = aggregate_all(&w.epochs, ClockWindow::default(), DEFAULT_BRIDGE_GAP_MIN).unwrap();
        assert_eq!(recs.len(), w.truth.n_nights);
        assert!(recs.iter().all(|r| r.duration_min >= 250 && r.duration_min <= 700));
        let with_nap = recs.iter().filter(|r| r.total24h_min.unwrap_or(0) > r.duration_min).count();
        assert!(with_nap <= w.truth.n_naps);
    }

    #[test]
    fn truth_families() {
        let k = Truth::kinked();
        assert_eq!(k.effect(5.0, Season::Summer, ""), 0.0);
        assert!((k.effect(12.0, Season::Summer, "") + 0.9).abs() < 1e-12);
        let b = Truth::Binned {
            edges: vec![0.0, 10.0],
            levels: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(b.effect(10.0, Season::Winter, ""), 3.0);
        let mut slopes = BTreeMap::new();
        slopes.insert("a".to_string(), -0.5);
        let g = Truth::Group { slopes };
        assert_eq!(g.effect(2.0, Season::Winter, "a"), -1.0);
        assert!(g.validate(&["a".into(), "b".into()]).is_err());
    }

    #[test]
    fn panel_shape() {
        let cfg = PanelSynthConfig {
            n_admin1: 3,
            users_per_admin1: 4,
            n_nights: 10,
            ..Default::default()
        };
        let p = synth_panel(&cfg, 3).unwrap();
        assert_eq!(p.panel.n_rows(), 120);
        assert_eq!(p.panel.fe.len(), 3);
        let p2 = synth_panel(&cfg, 3).unwrap();
        assert_eq!(p.panel, p2.panel);
    }
}
