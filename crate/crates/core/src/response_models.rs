//! Design matrices for the dose-response specifications, plus marginal
//! effects and curve post-processing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::panel_engine::{Codebook, FeDim, FitResult, Panel};
use crate::sleep_ingest::SleepRecord;
use crate::weather_link::{Exposure, WeatherVar};

/// Left-closed `[a, b)` bins with open-ended first and last bins.
///
/// With `k` edges there are `k + 1` bins: bin 0 is `(-inf, e0)`, bin `i` is
/// `[e(i-1), e(i))`, bin `k` is `[e(k-1), inf)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinScheme {
    pub variable: String,
    pub edges: Vec<f64>,
    pub reference_bin: usize,
}

impl BinScheme {
    pub fn new(variable: impl Into<String>, edges: Vec<f64>, reference_bin: usize) -> Result<Self> {
        let s = BinScheme {
            variable: variable.into(),
            edges,
            reference_bin,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.edges.is_empty() || self.edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::Validation(format!("bin scheme `{}` needs finite edges", self.variable)));
        }
        if self.edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!("bin edges for `{}` must be strictly ascending", self.variable)));
        }
        if self.reference_bin >= self.n_bins() {
            return Err(Error::Validation(format!(
                "reference bin {} out of range for `{}` ({} bins)",
                self.reference_bin,
                self.variable,
                self.n_bins()
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() + 1
    }

    /// `(lo, hi)` of a bin, with infinities at the open ends.
    pub fn bounds(&self, bin: usize) -> (f64, f64) {
        let lo = if bin == 0 { f64::NEG_INFINITY } else { self.edges[bin - 1] };
        let hi = self.edges.get(bin).copied().unwrap_or(f64::INFINITY);
        (lo, hi)
    }

    /// Column name for a bin indicator, e.g. `tmin[25,30)`.
    pub fn label(&self, bin: usize) -> String {
        let (lo, hi) = self.bounds(bin);
        format!("{}[{},{})", self.variable, lo, hi)
    }

    /// Bin whose range contains `(lo + hi) / 2`-style probes; used to locate a
    /// bin by one of its edges.
    pub fn bin_starting_at(&self, lo: f64) -> Option<usize> {
        (0..self.n_bins()).find(|&b| self.bounds(b).0 == lo)
    }
}

/// Index of the bin containing `x`: the number of edges `<= x`.
pub fn bin_value(x: f64, scheme: &BinScheme) -> usize {
    scheme.edges.partition_point(|&e| e <= x)
}

fn range_edges(lo: i32, hi: i32, step: i32) -> Vec<f64> {
    (lo..=hi).step_by(step as usize).map(f64::from).collect()
}

fn scheme_with_ref(variable: &str, edges: Vec<f64>, reference_lo: f64) -> BinScheme {
    let mut s = BinScheme {
        variable: variable.into(),
        edges,
        reference_bin: 0,
    };
    s.reference_bin = if reference_lo == f64::NEG_INFINITY {
        0
    } else {
        s.bin_starting_at(reference_lo).expect("reference edge present")
    };
    s
}

/// The default bin schemes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultSchemes {
    pub tmin: BinScheme,
    pub tmin_extended: BinScheme,
    pub dtr: BinScheme,
    pub prcp: BinScheme,
    pub wind: BinScheme,
    pub cloud: BinScheme,
    pub rh: BinScheme,
    pub anomaly: BinScheme,
    pub heat_index: BinScheme,
}

impl DefaultSchemes {
    pub fn control(&self, var: WeatherVar) -> &BinScheme {
        match var {
            WeatherVar::Tmin => &self.tmin,
            WeatherVar::DiurnalRange => &self.dtr,
            WeatherVar::Prcp => &self.prcp,
            WeatherVar::Wind => &self.wind,
            WeatherVar::Cloud => &self.cloud,
            WeatherVar::Rh => &self.rh,
        }
    }
}

pub fn default_schemes() -> DefaultSchemes {
    DefaultSchemes {
        tmin: scheme_with_ref("tmin", range_edges(-5, 25, 5), 5.0),
        tmin_extended: scheme_with_ref("tmin", range_edges(-20, 30, 5), 5.0),
        dtr: scheme_with_ref("dtr", range_edges(5, 20, 5), 5.0),
        // bin 0 is "no precipitation" (< 1 cm)
        prcp: scheme_with_ref("prcp", range_edges(1, 5, 1), f64::NEG_INFINITY),
        wind: scheme_with_ref("wind", range_edges(5, 15, 5), f64::NEG_INFINITY),
        cloud: scheme_with_ref("cloud", range_edges(20, 80, 20), f64::NEG_INFINITY),
        rh: scheme_with_ref("rh", range_edges(20, 80, 20), 60.0),
        anomaly: scheme_with_ref("tmin_anomaly", (-6..=5).map(|k| k as f64 + 0.5).collect(), -0.5),
        heat_index: scheme_with_ref("heat_index", range_edges(-5, 35, 5), 5.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Duration,
    #[serde(rename = "duration_24h")]
    Duration24h,
    Onset,
    Midsleep,
    Offset,
    ShortSleepLt7,
    ShortSleepLt6,
    ShortSleepLt5,
}

impl Outcome {
    pub fn value(self, r: &SleepRecord) -> Option<f64> {
        let short = |h: u32| Some(if r.duration_min < h * 60 { 1.0 } else { 0.0 });
        match self {
            Outcome::Duration => Some(r.duration_min as f64),
            Outcome::Duration24h => r.total24h_min.map(f64::from),
            Outcome::Onset => Some(r.onset_min as f64),
            Outcome::Midsleep => Some(r.midsleep_min),
            Outcome::Offset => Some(r.offset_min as f64),
            Outcome::ShortSleepLt7 => short(7),
            Outcome::ShortSleepLt6 => short(6),
            Outcome::ShortSleepLt5 => short(5),
        }
    }

    pub fn is_probability(self) -> bool {
        matches!(self, Outcome::ShortSleepLt7 | Outcome::ShortSleepLt6 | Outcome::ShortSleepLt5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Treatment {
    TminLinear,
    TminBinned,
    TminBinnedExtended,
    AnomalyLinear,
    AnomalyBinned,
    HeatIndexBinned,
}

impl Treatment {
    pub fn is_anomaly(self) -> bool {
        matches!(self, Treatment::AnomalyLinear | Treatment::AnomalyBinned)
    }

    pub fn is_linear(self) -> bool {
        matches!(self, Treatment::TminLinear | Treatment::AnomalyLinear)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlForm {
    #[default]
    Linear,
    Binned,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    #[default]
    None,
    Season,
    SummerMonth,
    /// A per-user attribute column such as an age group. An empty category
    /// list means "every label seen, sorted".
    Attribute {
        column: String,
        #[serde(default)]
        categories: Vec<String>,
    },
}

/// Regional time fixed effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionTimeFe {
    #[default]
    Adm1Month,
    Adm1Week,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub outcome: Outcome,
    pub treatment: Treatment,
    pub controls: ControlForm,
    pub normals: bool,
    pub interaction: Interaction,
    pub region_time_fe: RegionTimeFe,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            outcome: Outcome::Duration,
            treatment: Treatment::TminLinear,
            controls: ControlForm::Linear,
            normals: true,
            interaction: Interaction::None,
            region_time_fe: RegionTimeFe::Adm1Month,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.interaction != Interaction::None && !self.treatment.is_linear() {
            return Err(Error::Validation("interactions need a linear treatment".into()));
        }
        Ok(())
    }

    fn control_vars(&self) -> Vec<WeatherVar> {
        WeatherVar::ALL
            .into_iter()
            .filter(|v| *v != WeatherVar::Tmin)
            .filter(|v| !(self.treatment == Treatment::HeatIndexBinned && *v == WeatherVar::Rh))
            .collect()
    }

    fn normal_vars(&self) -> Vec<WeatherVar> {
        if !self.normals {
            return Vec::new();
        }
        WeatherVar::ALL
            .into_iter()
            .filter(|v| !(self.treatment.is_anomaly() && *v == WeatherVar::Tmin))
            .collect()
    }
}

/// Per-user location, region and attribute labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserInfo {
    pub user_id: String,
    pub lat: f64,
    pub lon: f64,
    pub admin1: String,
    pub attrs: BTreeMap<String, String>,
}

const USER_FIXED: [&str; 4] = ["user_id", "lat", "lon", "admin1"];

/// `users.csv`: `user_id, lat, lon, admin1` plus any attribute columns.
pub fn read_users_csv<R: Read>(reader: R, source: &str) -> Result<Vec<UserInfo>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| crate::io::schema_err(source, &e))?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Schema {
            path: source.to_string(),
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let idx: Vec<usize> = USER_FIXED.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| crate::io::schema_err(source, &e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| Error::Schema {
            path: source.to_string(),
            line,
            message,
        };
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("column `{}`: {e}", &headers[i])));
        let u = UserInfo {
            user_id: rec[idx[0]].to_string(),
            lat: num(idx[1])?,
            lon: num(idx[2])?,
            admin1: rec[idx[3]].to_string(),
            attrs: headers
                .iter()
                .enumerate()
                .filter(|(_, h)| !USER_FIXED.contains(h))
                .map(|(i, h)| (h.to_string(), rec[i].to_string()))
                .collect(),
        };
        if !crate::geo::LatLon::new(u.lat, u.lon).is_valid() {
            return Err(bad(format!("invalid coordinates ({}, {})", u.lat, u.lon)));
        }
        if !seen.insert(u.user_id.clone()) {
            return Err(bad(format!("duplicate user `{}`", u.user_id)));
        }
        out.push(u);
    }
    Ok(out)
}

pub fn write_users_csv<W: Write>(writer: W, users: &[UserInfo]) -> Result<()> {
    let extra: BTreeSet<&str> = users.iter().flat_map(|u| u.attrs.keys().map(String::as_str)).collect();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(USER_FIXED.iter().copied().chain(extra.iter().copied()))?;
    for u in users {
        let mut row = vec![u.user_id.clone(), u.lat.to_string(), u.lon.to_string(), u.admin1.clone()];
        row.extend(extra.iter().map(|k| u.attrs.get(*k).cloned().unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One joined person-night.
#[derive(Debug, Clone, Copy)]
pub struct NightRow<'a> {
    pub record: &'a SleepRecord,
    pub exposure: &'a Exposure,
    pub user: &'a UserInfo,
}

/// Join records with their exposures and user rows. Records lacking either
/// are an error.
pub fn join_nights<'a>(records: &'a [SleepRecord], exposures: &'a [Exposure], users: &'a [UserInfo]) -> Result<Vec<NightRow<'a>>> {
    let by_key: HashMap<(&str, NaiveDate), &Exposure> =
        exposures.iter().map(|e| ((e.user_id.as_str(), e.night_date), e)).collect();
    let by_user: HashMap<&str, &UserInfo> = users.iter().map(|u| (u.user_id.as_str(), u)).collect();
    records
        .iter()
        .map(|r| {
            let exposure = by_key
                .get(&(r.user_id.as_str(), r.night_date))
                .ok_or_else(|| Error::Validation(format!("no exposure for user `{}` on {}", r.user_id, r.night_date)))?;
            let user = by_user
                .get(r.user_id.as_str())
                .ok_or_else(|| Error::Validation(format!("user `{}` missing from users table", r.user_id)))?;
            Ok(NightRow {
                record: r,
                exposure,
                user,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Fall,
}

impl Season {
    pub const ALL: [Season; 4] = [Season::Winter, Season::Spring, Season::Summer, Season::Fall];

    pub fn name(self) -> &'static str {
        match self {
            Season::Winter => "winter",
            Season::Spring => "spring",
            Season::Summer => "summer",
            Season::Fall => "fall",
        }
    }
}

/// Meteorological season, flipped in the southern hemisphere.
pub fn season_of(date: NaiveDate, latitude: f64) -> Season {
    let north = match date.month() {
        12 | 1 | 2 => Season::Winter,
        3..=5 => Season::Spring,
        6..=8 => Season::Summer,
        _ => Season::Fall,
    };
    if latitude >= 0.0 {
        north
    } else {
        match north {
            Season::Winter => Season::Summer,
            Season::Spring => Season::Fall,
            Season::Summer => Season::Winter,
            Season::Fall => Season::Spring,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummerMonth {
    First,
    Last,
    Excluded,
}

impl SummerMonth {
    pub fn name(self) -> &'static str {
        match self {
            SummerMonth::First => "first",
            SummerMonth::Last => "last",
            SummerMonth::Excluded => "excluded",
        }
    }
}

/// June (December south of the equator) is the first summer month, August
/// (February) the last; every other month is excluded.
pub fn summer_month_label(date: NaiveDate, latitude: f64) -> SummerMonth {
    let (first, last) = if latitude >= 0.0 { (6, 8) } else { (12, 2) };
    match date.month() {
        m if m == first => SummerMonth::First,
        m if m == last => SummerMonth::Last,
        _ => SummerMonth::Excluded,
    }
}

/// Indicator columns generated from one binned variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedTerm {
    pub scheme: BinScheme,
    /// Observations per bin over the design rows.
    pub counts: Vec<usize>,
    /// Non-reference bins with no observations; no column was emitted.
    pub empty_bins: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignExclusions {
    pub missing_outcome: usize,
    pub missing_exposure: usize,
    pub missing_category: usize,
    pub outside_subset: usize,
}

#[derive(Debug, Clone)]
pub struct Design {
    pub panel: Panel,
    /// Index into the input rows for each design row.
    pub rows: Vec<usize>,
    pub treatment_columns: Vec<String>,
    pub treatment_term: Option<BinnedTerm>,
    pub control_terms: Vec<BinnedTerm>,
    /// Interaction categories in column order.
    pub categories: Vec<String>,
    pub excluded: DesignExclusions,
}

fn treatment_value(t: Treatment, e: &Exposure) -> Option<f64> {
    match t {
        Treatment::TminLinear | Treatment::TminBinned | Treatment::TminBinnedExtended => e.get(WeatherVar::Tmin),
        Treatment::AnomalyLinear | Treatment::AnomalyBinned => e.tmin_anomaly,
        Treatment::HeatIndexBinned => e.heat_index,
    }
}

fn linear_name(t: Treatment) -> &'static str {
    if t.is_anomaly() {
        "tmin_anomaly"
    } else {
        "tmin"
    }
}

fn region_time_label(date: NaiveDate, admin1: &str, plan: RegionTimeFe) -> String {
    match plan {
        RegionTimeFe::Adm1Month => format!("{admin1}:{:04}-{:02}", date.year(), date.month()),
        RegionTimeFe::Adm1Week => {
            let w = date.iso_week();
            format!("{admin1}:{:04}-W{:02}", w.year(), w.week())
        }
    }
}

/// Emit indicator columns for every non-reference, non-empty bin.
fn push_bins(values: &[f64], scheme: &BinScheme, names: &mut Vec<String>, cols: &mut Vec<Vec<f64>>) -> BinnedTerm {
    let idx: Vec<usize> = values.iter().map(|&v| bin_value(v, scheme)).collect();
    let mut counts = vec![0; scheme.n_bins()];
    for &b in &idx {
        counts[b] += 1;
    }
    let mut empty_bins = Vec::new();
    for b in 0..scheme.n_bins() {
        if b == scheme.reference_bin {
            continue;
        }
        if counts[b] == 0 {
            empty_bins.push(b);
            continue;
        }
        names.push(scheme.label(b));
        cols.push(idx.iter().map(|&i| if i == b { 1.0 } else { 0.0 }).collect());
    }
    BinnedTerm {
        scheme: scheme.clone(),
        counts,
        empty_bins,
    }
}

/// Assemble the regression panel for `spec` over the joined rows.
pub fn build_design(spec: &ModelSpec, rows: &[NightRow], schemes: &DefaultSchemes) -> Result<Design> {
    spec.validate()?;
    let controls = spec.control_vars();
    let normals = spec.normal_vars();
    let mut excluded = DesignExclusions::default();

    // category per row for interacted specs
    let (categories, category_of): (Vec<String>, Box<dyn Fn(&NightRow) -> Option<String>>) = match &spec.interaction {
        Interaction::None => (Vec::new(), Box::new(|_| Some(String::new()))),
        Interaction::Season => (
            Season::ALL.iter().map(|s| s.name().to_string()).collect(),
            Box::new(|r: &NightRow| Some(season_of(r.record.night_date, r.user.lat).name().to_string())),
        ),
        Interaction::SummerMonth => (
            vec!["first".into(), "last".into()],
            Box::new(|r: &NightRow| match summer_month_label(r.record.night_date, r.user.lat) {
                SummerMonth::Excluded => None,
                s => Some(s.name().to_string()),
            }),
        ),
        Interaction::Attribute { column, categories } => {
            let mut unknown_rows = Vec::new();
            let mut seen = BTreeSet::new();
            for (i, r) in rows.iter().enumerate() {
                let label = r.user.attrs.get(column).ok_or_else(|| {
                    Error::Validation(format!("users table has no attribute column `{column}`"))
                })?;
                if label.is_empty() {
                    continue;
                }
                if !categories.is_empty() && !categories.contains(label) {
                    unknown_rows.push(i);
                }
                seen.insert(label.clone());
            }
            if !unknown_rows.is_empty() {
                return Err(Error::UnknownCategory {
                    column: column.clone(),
                    rows: unknown_rows,
                });
            }
            let cats = if categories.is_empty() {
                seen.into_iter().collect()
            } else {
                categories.clone()
            };
            let column = column.clone();
            (
                cats,
                Box::new(move |r: &NightRow| {
                    let l = &r.user.attrs[&column];
                    (!l.is_empty()).then(|| l.clone())
                }),
            )
        }
    };

    let mut keep = Vec::new();
    let mut y = Vec::new();
    let mut row_cat = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let Some(out) = spec.outcome.value(r.record) else {
            excluded.missing_outcome += 1;
            continue;
        };
        let e = r.exposure;
        let have_all = treatment_value(spec.treatment, e).is_some()
            && controls.iter().all(|v| e.get(*v).is_some())
            && normals.iter().all(|v| e.normal(*v).is_some());
        if !have_all {
            excluded.missing_exposure += 1;
            continue;
        }
        let Some(cat) = category_of(r) else {
            match spec.interaction {
                Interaction::SummerMonth => excluded.outside_subset += 1,
                _ => excluded.missing_category += 1,
            }
            continue;
        };
        keep.push(i);
        y.push(out);
        row_cat.push(cat);
    }

    let mut names = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let treat: Vec<f64> = keep
        .iter()
        .map(|&i| treatment_value(spec.treatment, rows[i].exposure).expect("checked"))
        .collect();
    let treatment_term = match spec.treatment {
        Treatment::TminLinear | Treatment::AnomalyLinear => {
            let base = linear_name(spec.treatment);
            if categories.is_empty() {
                names.push(base.to_string());
                cols.push(treat);
            } else {
                for c in &categories {
                    names.push(format!("{base}:{c}"));
                    cols.push(treat.iter().zip(&row_cat).map(|(v, rc)| if rc == c { *v } else { 0.0 }).collect());
                }
            }
            None
        }
        Treatment::TminBinned => Some(push_bins(&treat, &schemes.tmin, &mut names, &mut cols)),
        Treatment::TminBinnedExtended => Some(push_bins(&treat, &schemes.tmin_extended, &mut names, &mut cols)),
        Treatment::AnomalyBinned => Some(push_bins(&treat, &schemes.anomaly, &mut names, &mut cols)),
        Treatment::HeatIndexBinned => Some(push_bins(&treat, &schemes.heat_index, &mut names, &mut cols)),
    };
    let treatment_columns = names.clone();

    let mut control_terms = Vec::new();
    for v in &controls {
        let vals: Vec<f64> = keep.iter().map(|&i| rows[i].exposure.get(*v).expect("checked")).collect();
        match spec.controls {
            ControlForm::Linear => {
                names.push(v.name().to_string());
                cols.push(vals);
            }
            ControlForm::Binned => control_terms.push(push_bins(&vals, schemes.control(*v), &mut names, &mut cols)),
        }
    }
    for v in &normals {
        names.push(format!("{}_normal", v.name()));
        cols.push(keep.iter().map(|&i| rows[i].exposure.normal(*v).expect("checked")).collect());
    }

    let user_labels: Vec<&str> = keep.iter().map(|&i| rows[i].record.user_id.as_str()).collect();
    let date_labels: Vec<String> = keep.iter().map(|&i| rows[i].record.night_date.to_string()).collect();
    let region_labels: Vec<String> = keep
        .iter()
        .map(|&i| region_time_label(rows[i].record.night_date, &rows[i].user.admin1, spec.region_time_fe))
        .collect();
    let region_name = match spec.region_time_fe {
        RegionTimeFe::Adm1Month => "fe_adm1month",
        RegionTimeFe::Adm1Week => "fe_adm1week",
    };
    let fe = vec![
        FeDim::from_labels("fe_user", &user_labels),
        FeDim::from_labels("fe_date", &date_labels),
        FeDim::from_labels(region_name, &region_labels),
    ];
    let mut book = Codebook::new();
    let cluster = keep.iter().map(|&i| book.code(&rows[i].user.admin1)).collect();
    let panel = Panel::new(y, cols, names, fe, cluster)?;
    Ok(Design {
        panel,
        rows: keep,
        treatment_columns,
        treatment_term,
        control_terms,
        categories,
        excluded,
    })
}

/// One point of a binned response curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bin: usize,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub coef: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_obs: usize,
}

/// Estimated bin coefficients; the reference bin is pinned at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub variable: String,
    pub reference_bin: usize,
    pub probability: bool,
    pub points: Vec<CurvePoint>,
}

pub const Z95: f64 = 1.96;

impl ResponseCurve {
    /// Points for the reference bin and every bin the fit estimated.
    pub fn from_fit(fit: &FitResult, term: &BinnedTerm, probability: bool) -> Self {
        let s = &term.scheme;
        let points = (0..s.n_bins())
            .filter_map(|b| {
                let (coef, se) = if b == s.reference_bin {
                    (0.0, 0.0)
                } else {
                    let name = s.label(b);
                    (fit.coef(&name)?, fit.std_err(&name)?)
                };
                let (lo, hi) = s.bounds(b);
                Some(CurvePoint {
                    bin: b,
                    bin_lo: lo,
                    bin_hi: hi,
                    coef,
                    se,
                    ci_lo: coef - Z95 * se,
                    ci_hi: coef + Z95 * se,
                    n_obs: term.counts[b],
                })
            })
            .collect();
        ResponseCurve {
            variable: s.variable.clone(),
            reference_bin: s.reference_bin,
            probability,
            points,
        }
    }

    pub fn point(&self, bin: usize) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.bin == bin)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveCsvRow {
    bin_lo: f64,
    bin_hi: f64,
    coef: f64,
    ci_lo: f64,
    ci_hi: f64,
    n_obs: usize,
}

/// `curve.csv`: `bin_lo, bin_hi, coef, ci_lo, ci_hi, n_obs`, open ends as `-inf`/`inf`.
pub fn write_curve_csv<W: Write>(writer: W, curve: &ResponseCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in &curve.points {
        w.serialize(CurveCsvRow {
            bin_lo: p.bin_lo,
            bin_hi: p.bin_hi,
            coef: p.coef,
            ci_lo: p.ci_lo,
            ci_hi: p.ci_hi,
            n_obs: p.n_obs,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Read `curve.csv` back. Bins are numbered in file order and the reference
/// bin is the one with a zero-width interval.
pub fn read_curve_csv<R: Read>(reader: R, source: &str) -> Result<ResponseCurve> {
    let rows = crate::io::read_rows::<CurveCsvRow, _>(reader, source)?;
    let mut reference_bin = 0;
    let mut points = Vec::with_capacity(rows.len());
    for (bin, (line, r)) in rows.into_iter().enumerate() {
        if !(r.bin_lo < r.bin_hi) || r.ci_lo > r.coef || r.coef > r.ci_hi {
            return Err(Error::Schema {
                path: source.to_string(),
                line,
                message: "expected bin_lo < bin_hi and ci_lo <= coef <= ci_hi".into(),
            });
        }
        if r.coef == 0.0 && r.ci_lo == 0.0 && r.ci_hi == 0.0 {
            reference_bin = bin;
        }
        points.push(CurvePoint {
            bin,
            bin_lo: r.bin_lo,
            bin_hi: r.bin_hi,
            coef: r.coef,
            se: (r.ci_hi - r.ci_lo) / (2.0 * Z95),
            ci_lo: r.ci_lo,
            ci_hi: r.ci_hi,
            n_obs: r.n_obs,
        });
    }
    Ok(ResponseCurve {
        variable: String::new(),
        reference_bin,
        probability: false,
        points,
    })
}

/// Additional short-sleep count implied by moving a population from one bin
/// to another: `(coef[to] - coef[from]) * population`.
pub fn scale_extrapolation(curve: &ResponseCurve, from_bin: usize, to_bin: usize, population: f64) -> Result<f64> {
    let get = |b: usize| {
        curve
            .point(b)
            .map(|p| p.coef)
            .ok_or_else(|| Error::Validation(format!("bin {b} is not on the curve")))
    };
    Ok((get(to_bin)? - get(from_bin)?) * population)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySlope {
    pub category: String,
    pub slope: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub a: String,
    pub b: String,
    pub difference: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalEffects {
    pub slopes: Vec<CategorySlope>,
    pub pairs: Vec<PairTest>,
}

/// Two-sided normal p-value.
pub fn normal_p_value(z: f64) -> f64 {
    let n = Normal::standard();
    2.0 * n.cdf(-z.abs())
}

/// Per-category slopes of the treatment `base` (columns `base:category`) and
/// Wald z-tests for every pair of categories.
pub fn marginal_effects(fit: &FitResult, base: &str, categories: &[String]) -> Result<MarginalEffects> {
    let cols: Vec<String> = categories.iter().map(|c| format!("{base}:{c}")).collect();
    let idx: Vec<usize> = cols
        .iter()
        .map(|c| fit.index(c).ok_or_else(|| Error::Validation(format!("category column `{c}` absent from fit"))))
        .collect::<Result<_>>()?;
    let slopes = categories
        .iter()
        .zip(&idx)
        .map(|(c, &i)| CategorySlope {
            category: c.clone(),
            slope: fit.beta[i],
            se: fit.se[i],
        })
        .collect();
    let mut pairs = Vec::new();
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            let (i, j) = (idx[a], idx[b]);
            let difference = fit.beta[i] - fit.beta[j];
            let var = fit.vcov[i][i] + fit.vcov[j][j] - 2.0 * fit.vcov[i][j];
            if !(var > 0.0) {
                return Err(Error::Numerical(format!(
                    "non-positive variance for {} - {}",
                    categories[a], categories[b]
                )));
            }
            let se = var.sqrt();
            let z = difference / se;
            pairs.push(PairTest {
                a: categories[a].clone(),
                b: categories[b].clone(),
                difference,
                se,
                z,
                p_value: normal_p_value(z),
            });
        }
    }
    Ok(MarginalEffects { slopes, pairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Joint Wald test of `beta[names] == values` with a chi-square reference.
pub fn wald_test(fit: &FitResult, names: &[String], values: &[f64]) -> Result<WaldTest> {
    if names.len() != values.len() || names.is_empty() {
        return Err(Error::Validation("wald test needs one hypothesised value per coefficient".into()));
    }
    let idx: Vec<usize> = names
        .iter()
        .map(|n| fit.index(n).ok_or_else(|| Error::Validation(format!("coefficient `{n}` absent from fit"))))
        .collect::<Result<_>>()?;
    let k = idx.len();
    let v = DMatrix::from_fn(k, k, |a, b| fit.vcov[idx[a]][idx[b]]);
    let d = DVector::from_iterator(k, idx.iter().zip(values).map(|(&i, v)| fit.beta[i] - v));
    let chol = v
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariance block is not positive definite".into()))?;
    let statistic = d.dot(&chol.solve(&d));
    let chi = ChiSquared::new(k as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(WaldTest {
        statistic,
        df: k,
        p_value: 1.0 - chi.cdf(statistic),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn bin_lookup() {
        let s = default_schemes();
        assert_eq!(bin_value(7.0, &s.tmin), s.tmin.reference_bin);
        assert_eq!(s.tmin.bounds(s.tmin.reference_bin), (5.0, 10.0));
        assert_eq!(s.tmin.bounds(bin_value(10.0, &s.tmin)), (10.0, 15.0));
        assert_eq!(s.tmin.bounds(bin_value(-0.3, &s.tmin)), (-5.0, 0.0));
        assert_eq!(s.tmin.bounds(bin_value(27.0, &s.tmin)), (25.0, f64::INFINITY));
        assert_eq!(s.tmin_extended.bounds(bin_value(27.0, &s.tmin_extended)), (25.0, 30.0));
        assert_eq!(s.tmin_extended.bounds(bin_value(31.0, &s.tmin_extended)), (30.0, f64::INFINITY));
        assert_eq!(s.tmin_extended.bounds(bin_value(-25.0, &s.tmin_extended)), (f64::NEG_INFINITY, -20.0));
        assert_eq!(bin_value(0.2, &s.anomaly), s.anomaly.reference_bin);
        assert_eq!(s.anomaly.bounds(bin_value(1.4, &s.anomaly)), (0.5, 1.5));
        assert_eq!(s.anomaly.bounds(s.anomaly.reference_bin), (-0.5, 0.5));
    }

    #[test]
    fn default_references() {
        let s = default_schemes();
        assert_eq!(s.dtr.bounds(s.dtr.reference_bin), (5.0, 10.0));
        assert_eq!(s.prcp.bounds(s.prcp.reference_bin), (f64::NEG_INFINITY, 1.0));
        assert_eq!(s.wind.bounds(s.wind.reference_bin), (f64::NEG_INFINITY, 5.0));
        assert_eq!(s.cloud.bounds(s.cloud.reference_bin), (f64::NEG_INFINITY, 20.0));
        assert_eq!(s.rh.bounds(s.rh.reference_bin), (60.0, 80.0));
        for scheme in [&s.tmin, &s.tmin_extended, &s.dtr, &s.prcp, &s.wind, &s.cloud, &s.rh, &s.anomaly, &s.heat_index] {
            scheme.validate().unwrap();
        }
    }

    #[test]
    fn scheme_validation() {
        assert!(BinScheme::new("x", vec![1.0, 1.0], 0).is_err());
        assert!(BinScheme::new("x", vec![1.0, 2.0], 3).is_err());
        assert!(BinScheme::new("x", vec![], 0).is_err());
    }

    proptest! {
        #[test]
        fn every_value_in_exactly_one_bin(x in -1e6f64..1e6) {
            let s = default_schemes().tmin;
            let b = bin_value(x, &s);
            let (lo, hi) = s.bounds(b);
            prop_assert!(lo <= x && x < hi);
            let hits = (0..s.n_bins()).filter(|&k| { let (a, c) = s.bounds(k); a <= x && x < c }).count();
            prop_assert_eq!(hits, 1);
        }

        #[test]
        fn shifting_by_one_width_moves_one_bin(x in -4.9f64..19.9) {
            let s = default_schemes().tmin;
            prop_assert_eq!(bin_value(x + 5.0, &s), bin_value(x, &s) + 1);
        }
    }

    #[test]
    fn seasons() {
        assert_eq!(season_of(d(2016, 7, 1), 48.0), Season::Summer);
        assert_eq!(season_of(d(2016, 1, 15), -33.0), Season::Summer);
        assert_eq!(season_of(d(2016, 10, 1), 10.0), Season::Fall);
        assert_eq!(season_of(d(2016, 4, 1), -10.0), Season::Fall);
        assert_eq!(summer_month_label(d(2016, 6, 3), 40.0), SummerMonth::First);
        assert_eq!(summer_month_label(d(2016, 2, 3), -30.0), SummerMonth::Last);
        assert_eq!(summer_month_label(d(2016, 3, 3), 40.0), SummerMonth::Excluded);
        assert_eq!(summer_month_label(d(2016, 12, 3), -30.0), SummerMonth::First);
        assert_eq!(summer_month_label(d(2016, 8, 3), 40.0), SummerMonth::Last);
    }

    fn fixture(n_users: usize, nights: u32) -> (Vec<SleepRecord>, Vec<Exposure>, Vec<UserInfo>) {
        let mut recs = Vec::new();
        let mut exps = Vec::new();
        let mut users = Vec::new();
        for u in 0..n_users {
            let id = format!("u{u}");
            let lat = if u % 2 == 0 { 40.0 } else { -35.0 };
            let mut attrs = BTreeMap::new();
            attrs.insert("age".to_string(), if u % 3 == 0 { "old".to_string() } else { "young".to_string() });
            users.push(UserInfo {
                user_id: id.clone(),
                lat,
                lon: 10.0,
                admin1: format!("r{}", u % 4),
                attrs,
            });
            for k in 0..nights {
                let date = d(2016, 1, 1) + chrono::Duration::days(k as i64 * 7 + u as i64);
                let tmin = ((u * 7 + k as usize * 13) % 35) as f64 - 5.0;
                let dur = 420 + ((u + k as usize) % 60) as u32;
                recs.push(SleepRecord::new(&id, date, 660, 660 + dur as i64, dur));
                exps.push(Exposure {
                    user_id: id.clone(),
                    night_date: date,
                    values: [Some(tmin), Some(8.0 + (k % 9) as f64), Some((k % 4) as f64), Some(3.0), Some(30.0), Some(55.0)],
                    normals: [Some(10.0 + u as f64 * 0.1), Some(9.0), Some(0.5), Some(3.5), Some(40.0), Some(60.0)],
                    tmin_anomaly: Some(tmin - 10.0 - u as f64 * 0.1),
                    heat_index: Some(tmin),
                });
            }
        }
        (recs, exps, users)
    }

    #[test]
    fn eq_1a_columns() {
        let (r, e, u) = fixture(6, 20);
        let rows = join_nights(&r, &e, &u).unwrap();
        let des = build_design(&ModelSpec::default(), &rows, &default_schemes()).unwrap();
        assert_eq!(
            des.panel.names,
            vec![
                "tmin", "dtr", "prcp", "wind", "cloud", "rh", "tmin_normal", "dtr_normal", "prcp_normal", "wind_normal",
                "cloud_normal", "rh_normal"
            ]
        );
        assert_eq!(des.panel.fe.len(), 3);
        assert_eq!(des.panel.n_rows(), 120);
    }

    #[test]
    fn anomaly_spec_drops_tmin_normal() {
        let (r, e, u) = fixture(6, 20);
        let rows = join_nights(&r, &e, &u).unwrap();
        let spec = ModelSpec {
            treatment: Treatment::AnomalyLinear,
            ..Default::default()
        };
        let des = build_design(&spec, &rows, &default_schemes()).unwrap();
        assert_eq!(des.panel.names[0], "tmin_anomaly");
        assert!(!des.panel.names.iter().any(|n| n == "tmin_normal" || n == "tmin"));
    }

    #[test]
    fn season_interaction_columns() {
        let (r, e, u) = fixture(6, 40);
        let rows = join_nights(&r, &e, &u).unwrap();
        let spec = ModelSpec {
            interaction: Interaction::Season,
            ..Default::default()
        };
        let des = build_design(&spec, &rows, &default_schemes()).unwrap();
        assert_eq!(&des.panel.names[..4], &["tmin:winter", "tmin:spring", "tmin:summer", "tmin:fall"]);
        assert!(!des.panel.names.iter().any(|n| n == "tmin"));
        // the four interaction columns add back to tmin
        for i in 0..des.panel.n_rows() {
            let s: f64 = (0..4).map(|c| des.panel.x[c][i]).sum();
            assert_eq!(s, rows[des.rows[i]].exposure.get(WeatherVar::Tmin).unwrap());
        }
    }

    #[test]
    fn heat_index_replaces_tmin_and_rh() {
        let (r, e, u) = fixture(6, 20);
        let rows = join_nights(&r, &e, &u).unwrap();
        let spec = ModelSpec {
            treatment: Treatment::HeatIndexBinned,
            ..Default::default()
        };
        let des = build_design(&spec, &rows, &default_schemes()).unwrap();
        assert!(des.panel.names.iter().all(|n| n != "tmin" && n != "rh"));
        assert!(des.panel.names.iter().any(|n| n.starts_with("heat_index[")));
    }

    #[test]
    fn binned_indicators_sum_to_one_minus_reference() {
        let (r, e, u) = fixture(6, 20);
        let rows = join_nights(&r, &e, &u).unwrap();
        let spec = ModelSpec {
            treatment: Treatment::TminBinned,
            controls: ControlForm::Binned,
            ..Default::default()
        };
        let schemes = default_schemes();
        let des = build_design(&spec, &rows, &schemes).unwrap();
        let term = des.treatment_term.as_ref().unwrap();
        let k = des.treatment_columns.len();
        for i in 0..des.panel.n_rows() {
            let s: f64 = (0..k).map(|c| des.panel.x[c][i]).sum();
            let t = rows[des.rows[i]].exposure.get(WeatherVar::Tmin).unwrap();
            let is_ref = bin_value(t, &term.scheme) == term.scheme.reference_bin;
            assert_eq!(s, if is_ref { 0.0 } else { 1.0 });
        }
        assert_eq!(term.counts.iter().sum::<usize>(), des.panel.n_rows());
        // constant wind of 3 m/s lands entirely in the reference bin, so no wind columns
        assert!(!des.panel.names.iter().any(|n| n.starts_with("wind[")));
    }

    #[test]
    fn design_is_deterministic() {
        let (r, e, u) = fixture(5, 15);
        let rows = join_nights(&r, &e, &u).unwrap();
        let spec = ModelSpec {
            treatment: Treatment::TminBinned,
            ..Default::default()
        };
        let a = build_design(&spec, &rows, &default_schemes()).unwrap();
        let b = build_design(&spec, &rows, &default_schemes()).unwrap();
        assert_eq!(a.panel, b.panel);
    }

    #[test]
    fn unknown_category_lists_rows() {
        let (r, e, mut u) = fixture(4, 3);
        u[1].attrs.insert("age".into(), "ancient".into());
        let rows = join_nights(&r, &e, &u).unwrap();
        let spec = ModelSpec {
            interaction: Interaction::Attribute {
                column: "age".into(),
                categories: vec!["old".into(), "young".into()],
            },
            ..Default::default()
        };
        match build_design(&spec, &rows, &default_schemes()) {
            Err(Error::UnknownCategory { column, rows }) => {
                assert_eq!(column, "age");
                assert_eq!(rows, vec![3, 4, 5]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn summer_month_excludes_other_months() {
        let (r, e, u) = fixture(4, 52);
        let rows = join_nights(&r, &e, &u).unwrap();
        let spec = ModelSpec {
            interaction: Interaction::SummerMonth,
            ..Default::default()
        };
        let des = build_design(&spec, &rows, &default_schemes()).unwrap();
        assert!(des.excluded.outside_subset > 0);
        for &i in &des.rows {
            let r = &rows[i];
            assert_ne!(summer_month_label(r.record.night_date, r.user.lat), SummerMonth::Excluded);
        }
    }

    #[test]
    fn midsleep_identity_in_data() {
        let (r, _, _) = fixture(3, 10);
        for rec in &r {
            let on = Outcome::Onset.value(rec).unwrap();
            let off = Outcome::Offset.value(rec).unwrap();
            assert_eq!(Outcome::Midsleep.value(rec).unwrap(), (on + off) / 2.0);
        }
    }

    #[test]
    fn short_sleep_strict() {
        let r = SleepRecord::new("a", d(2016, 1, 1), 660, 1080, 420);
        assert_eq!(Outcome::ShortSleepLt7.value(&r), Some(0.0));
        let r = SleepRecord::new("a", d(2016, 1, 1), 660, 1079, 419);
        assert_eq!(Outcome::ShortSleepLt7.value(&r), Some(1.0));
    }

    fn curve(coefs: &[(usize, f64)]) -> ResponseCurve {
        ResponseCurve {
            variable: "tmin".into(),
            reference_bin: 0,
            probability: true,
            points: coefs
                .iter()
                .map(|&(bin, coef)| CurvePoint {
                    bin,
                    bin_lo: bin as f64,
                    bin_hi: bin as f64 + 1.0,
                    coef,
                    se: 0.0,
                    ci_lo: coef,
                    ci_hi: coef,
                    n_obs: 1,
                })
                .collect(),
        }
    }

    #[test]
    fn extrapolation_fixture_arithmetic() {
        let c = curve(&[(0, 0.0), (1, 0.011), (2, 0.035)]);
        assert_eq!(scale_extrapolation(&c, 0, 1, 100_000.0).unwrap(), 1100.0);
        assert!((scale_extrapolation(&c, 0, 2, 100_000.0).unwrap() - 3500.0).abs() < 1e-9);
        assert_eq!(scale_extrapolation(&c, 1, 1, 100_000.0).unwrap(), 0.0);
        assert!(scale_extrapolation(&c, 0, 7, 1.0).is_err());
    }

    fn fake_fit(names: &[&str], beta: &[f64], vcov: Vec<Vec<f64>>) -> FitResult {
        FitResult {
            names: names.iter().map(|s| s.to_string()).collect(),
            beta: beta.to_vec(),
            se: (0..beta.len()).map(|i| vcov[i][i].sqrt()).collect(),
            vcov,
            n_obs: 100,
            n_clusters: 10,
            dropped_singletons: 0,
            dropped_collinear: vec![],
            fe_levels: vec![],
            k_absorbed: 0,
            converged: true,
            iterations: 1,
            vcov_kind: Default::default(),
            residuals: vec![],
        }
    }

    #[test]
    fn pairwise_difference_test() {
        // elderly -0.61 vs mid-age -0.28 with tight SEs
        let fit = fake_fit(&["tmin:old", "tmin:mid"], &[-0.61, -0.28], vec![vec![0.0025, 0.0005], vec![0.0005, 0.0016]]);
        let m = marginal_effects(&fit, "tmin", &["old".into(), "mid".into()]).unwrap();
        let p = &m.pairs[0];
        let se = (0.0025f64 + 0.0016 - 0.001).sqrt();
        assert!((p.se - se).abs() < 1e-15);
        assert!((p.z - (-0.33 / se)).abs() < 1e-12);
        assert!(p.p_value < 0.01);
        assert!(marginal_effects(&fit, "tmin", &["young".into()]).is_err());
    }

    #[test]
    fn normal_p_values() {
        assert!((normal_p_value(1.959963984540054) - 0.05).abs() < 1e-9);
        assert!((normal_p_value(0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn wald_matches_single_z_squared() {
        let fit = fake_fit(&["a", "b"], &[1.0, 2.0], vec![vec![0.25, 0.0], vec![0.0, 1.0]]);
        let w = wald_test(&fit, &["a".into()], &[0.0]).unwrap();
        assert!((w.statistic - 4.0).abs() < 1e-12);
        assert!((w.p_value - normal_p_value(2.0)).abs() < 1e-10);
        let w2 = wald_test(&fit, &["a".into(), "b".into()], &[0.0, 0.0]).unwrap();
        assert!((w2.statistic - 8.0).abs() < 1e-12);
        assert!((w2.p_value - (-4.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn curve_csv_roundtrip() {
        let c = ResponseCurve {
            variable: "tmin".into(),
            reference_bin: 1,
            probability: false,
            points: vec![
                CurvePoint { bin: 0, bin_lo: f64::NEG_INFINITY, bin_hi: 5.0, coef: 1.5, se: 0.5, ci_lo: 0.52, ci_hi: 2.48, n_obs: 3 },
                CurvePoint { bin: 1, bin_lo: 5.0, bin_hi: 10.0, coef: 0.0, se: 0.0, ci_lo: 0.0, ci_hi: 0.0, n_obs: 9 },
                CurvePoint { bin: 2, bin_lo: 10.0, bin_hi: f64::INFINITY, coef: -2.0, se: 1.0, ci_lo: -3.96, ci_hi: -0.04, n_obs: 4 },
            ],
        };
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &c).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("bin_lo,bin_hi,coef,ci_lo,ci_hi,n_obs\n-inf,5.0,1.5,"));
        let back = read_curve_csv(buf.as_slice(), "curve.csv").unwrap();
        assert_eq!(back.reference_bin, 1);
        assert_eq!(back.points[2].bin_hi, f64::INFINITY);
        assert!((back.points[0].se - 0.5).abs() < 1e-12);
    }

    #[test]
    fn users_csv_roundtrip() {
        let (_, _, u) = fixture(3, 1);
        let mut buf = Vec::new();
        write_users_csv(&mut buf, &u).unwrap();
        let back = read_users_csv(buf.as_slice(), "users.csv").unwrap();
        assert_eq!(back, u);
        let dup = "user_id,lat,lon,admin1\na,1,1,x\na,1,1,x\n";
        match read_users_csv(dup.as_bytes(), "users.csv") {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
