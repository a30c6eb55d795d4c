//! Minute-epoch sleep/wake streams to nightly sleep records.
//!
//! All clock quantities on a [`SleepRecord`] are minutes relative to noon of
//! the night's date, so an 23:00 onset is `660` and a 07:00 offset on the
//! following morning is `1140`. This keeps onset/offset arithmetic monotone
//! across midnight.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, Duration, FixedOffset, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_rows;

/// Naps at or above this many sleep minutes never count toward the 24 h total.
pub const MAX_NAP_MIN: u32 = 240;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SleepState {
    Wake,
    Sleep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Epoch {
    pub timestamp: DateTime<FixedOffset>,
    pub state: SleepState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochStream {
    pub user_id: String,
    pub epochs: Vec<Epoch>,
}

/// One person-night.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SleepRecord {
    pub user_id: String,
    pub night_date: NaiveDate,
    pub onset_min: i64,
    pub offset_min: i64,
    pub midsleep_min: f64,
    pub duration_min: u32,
    pub total24h_min: Option<u32>,
}

impl SleepRecord {
    pub fn new(user_id: impl Into<String>, night_date: NaiveDate, onset_min: i64, offset_min: i64, duration_min: u32) -> Self {
        SleepRecord {
            user_id: user_id.into(),
            night_date,
            onset_min,
            offset_min,
            midsleep_min: midpoint(onset_min, offset_min),
            duration_min,
            total24h_min: None,
        }
    }
}

/// `(a + b) / 2` computed exactly for any pair of minute counts that fit in
/// 52 bits, which covers every realistic timestamp range.
fn midpoint(a: i64, b: i64) -> f64 {
    (a + b) as f64 / 2.0
}

/// A merged run of sleep bouts (gaps at most `bridge_gap_min` apart).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SleepPeriod {
    pub onset: NaiveDateTime,
    /// Exclusive end: last SLEEP epoch + 1 minute.
    pub offset: NaiveDateTime,
    pub sleep_min: u32,
}

impl SleepPeriod {
    /// Calendar date of the noon immediately preceding onset.
    pub fn night_date(&self) -> NaiveDate {
        night_date_of(self.onset)
    }
}

/// Sleep outside the nightly principal period, attributed to a night.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Nap {
    pub night_date: NaiveDate,
    pub sleep_min: u32,
}

pub fn night_date_of(onset: NaiveDateTime) -> NaiveDate {
    if onset.hour() >= 12 {
        onset.date()
    } else {
        onset.date() - Duration::days(1)
    }
}

fn minutes_from_noon(night: NaiveDate, t: NaiveDateTime) -> i64 {
    let noon = night.and_time(NaiveTime::from_hms_opt(12, 0, 0).expect("noon"));
    (t - noon).num_minutes()
}

/// Clock window that may wrap past midnight, inclusive at both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockWindow {
    pub start: NaiveTime,
    pub end: NaiveTime,
}

impl ClockWindow {
    pub fn new(start: NaiveTime, end: NaiveTime) -> Self {
        ClockWindow { start, end }
    }

    pub fn hm(start: (u32, u32), end: (u32, u32)) -> Self {
        ClockWindow {
            start: NaiveTime::from_hms_opt(start.0, start.1, 0).expect("valid start"),
            end: NaiveTime::from_hms_opt(end.0, end.1, 0).expect("valid end"),
        }
    }

    pub fn contains(&self, t: NaiveTime) -> bool {
        if self.start <= self.end {
            self.start <= t && t <= self.end
        } else {
            t >= self.start || t <= self.end
        }
    }

    /// The open interval `(lo, hi)` this window spans, in minutes from noon.
    fn noon_relative_bounds(&self) -> (i64, i64) {
        let lo = clock_minutes_from_noon(self.start);
        let mut hi = clock_minutes_from_noon(self.end);
        if hi <= lo {
            hi += 1440;
        }
        (lo, hi)
    }
}

fn clock_minutes_from_noon(t: NaiveTime) -> i64 {
    let m = (t.hour() * 60 + t.minute()) as i64;
    (m - 720).rem_euclid(1440)
}

impl Default for ClockWindow {
    /// The nocturnal window used to find principal sleep periods.
    fn default() -> Self {
        ClockWindow::hm((19, 0), (8, 0))
    }
}

pub const DEFAULT_BRIDGE_GAP_MIN: u32 = 60;

fn check_stream(stream: &EpochStream) -> Result<()> {
    if stream.epochs.is_empty() {
        return Err(Error::Validation(format!("empty epoch stream for user `{}`", stream.user_id)));
    }
    for (i, pair) in stream.epochs.windows(2).enumerate() {
        let dt = (pair[1].timestamp - pair[0].timestamp).num_seconds();
        if dt <= 0 {
            return Err(Error::NonMonotoneTimestamps {
                row: i + 1,
                detail: format!("{} follows {}", pair[1].timestamp, pair[0].timestamp),
            });
        }
        if dt % 60 != 0 {
            return Err(Error::Validation(format!(
                "row {}: epochs must sit on a 1-minute lattice, got a {dt} s step",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Split a stream into SLEEP bouts and merge bouts separated by at most
/// `bridge_gap_min` minutes of non-sleep (WAKE epochs or unobserved minutes).
pub fn sleep_periods(stream: &EpochStream, bridge_gap_min: u32) -> Result<Vec<SleepPeriod>> {
    check_stream(stream)?;

    // (start instant, end instant, local start, local end, minutes)
    let mut bouts: Vec<(DateTime<FixedOffset>, DateTime<FixedOffset>, NaiveDateTime, NaiveDateTime, u32)> = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    let close = |bouts: &mut Vec<_>, (first, last): (usize, usize)| {
        let a: &Epoch = &stream.epochs[first];
        let b: &Epoch = &stream.epochs[last];
        let end = b.timestamp + Duration::minutes(1);
        bouts.push((a.timestamp, end, a.timestamp.naive_local(), end.naive_local(), (last - first + 1) as u32));
    };
    for (i, e) in stream.epochs.iter().enumerate() {
        match (e.state, current) {
            (SleepState::Sleep, Some((first, last)))
                if (e.timestamp - stream.epochs[last].timestamp).num_seconds() == 60 =>
            {
                current = Some((first, i));
            }
            (SleepState::Sleep, Some(run)) => {
                close(&mut bouts, run);
                current = Some((i, i));
            }
            (SleepState::Sleep, None) => current = Some((i, i)),
            (SleepState::Wake, Some(run)) => {
                close(&mut bouts, run);
                current = None;
            }
            (SleepState::Wake, None) => {}
        }
    }
    if let Some(run) = current {
        close(&mut bouts, run);
    }

    let mut periods: Vec<SleepPeriod> = Vec::new();
    let mut last_end: Option<DateTime<FixedOffset>> = None;
    for (start, end, local_start, local_end, minutes) in bouts {
        let bridged = last_end
            .map(|prev| (start - prev).num_minutes() <= bridge_gap_min as i64)
            .unwrap_or(false);
        if bridged {
            let p = periods.last_mut().expect("bridged onto an existing period");
            p.offset = local_end;
            p.sleep_min += minutes;
        } else {
            periods.push(SleepPeriod {
                onset: local_start,
                offset: local_end,
                sleep_min: minutes,
            });
        }
        last_end = Some(end);
    }
    Ok(periods)
}

/// Pick the nightly principal period for each night and collect the rest as naps.
pub fn split_principal(periods: Vec<SleepPeriod>, nocturnal: ClockWindow) -> (Vec<SleepPeriod>, Vec<Nap>) {
    let mut best: BTreeMap<NaiveDate, usize> = BTreeMap::new();
    for (i, p) in periods.iter().enumerate() {
        if !nocturnal.contains(p.onset.time()) {
            continue;
        }
        let night = p.night_date();
        match best.get(&night) {
            Some(&j) if periods[j].sleep_min >= p.sleep_min => {}
            _ => {
                best.insert(night, i);
            }
        }
    }
    let principal_idx: Vec<usize> = best.values().copied().collect();
    let mut principal = Vec::with_capacity(principal_idx.len());
    let mut naps = Vec::new();
    for (i, p) in periods.into_iter().enumerate() {
        if principal_idx.contains(&i) {
            principal.push(p);
        } else {
            naps.push(Nap {
                night_date: p.night_date(),
                sleep_min: p.sleep_min,
            });
        }
    }
    (principal, naps)
}

/// Nightly duration plus qualifying naps (each under four hours) attributed to
/// the same night.
pub fn daily_total_24h(record: &SleepRecord, naps: &[Nap]) -> u32 {
    record.duration_min
        + naps
            .iter()
            .filter(|n| n.night_date == record.night_date && n.sleep_min < MAX_NAP_MIN)
            .map(|n| n.sleep_min)
            .sum::<u32>()
}

/// Aggregate one user's stream into nightly records, one per night, sorted by date.
pub fn aggregate_epochs(stream: &EpochStream, nocturnal: ClockWindow, bridge_gap_min: u32) -> Result<Vec<SleepRecord>> {
    let periods = sleep_periods(stream, bridge_gap_min)?;
    let (principal, naps) = split_principal(periods, nocturnal);
    Ok(principal
        .into_iter()
        .map(|p| {
            let night = p.night_date();
            let mut r = SleepRecord::new(
                stream.user_id.clone(),
                night,
                minutes_from_noon(night, p.onset),
                minutes_from_noon(night, p.offset),
                p.sleep_min,
            );
            r.total24h_min = Some(daily_total_24h(&r, &naps));
            r
        })
        .collect())
}

/// Aggregate independent users in parallel; output order follows input order.
pub fn aggregate_all(streams: &[EpochStream], nocturnal: ClockWindow, bridge_gap_min: u32) -> Result<Vec<SleepRecord>> {
    let per_user: Vec<Vec<SleepRecord>> = streams
        .par_iter()
        .map(|s| aggregate_epochs(s, nocturnal, bridge_gap_min))
        .collect::<Result<_>>()?;
    Ok(per_user.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionConfig {
    pub min_duration_h: f64,
    pub max_duration_h: f64,
    pub onset_window: ClockWindow,
    pub offset_window: ClockWindow,
    pub min_nights: usize,
    pub min_coverage: f64,
}

impl Default for InclusionConfig {
    fn default() -> Self {
        InclusionConfig {
            min_duration_h: 4.0,
            max_duration_h: 12.0,
            onset_window: ClockWindow::hm((19, 0), (8, 0)),
            offset_window: ClockWindow::hm((0, 0), (15, 0)),
            min_nights: 28,
            min_coverage: 0.25,
        }
    }
}

impl InclusionConfig {
    /// Alternate minimum-night thresholds used for robustness runs.
    pub const ALT_MIN_NIGHTS: [usize; 3] = [56, 84, 112];
    /// Alternate coverage thresholds used for robustness runs.
    pub const ALT_MIN_COVERAGE: [f64; 3] = [0.50, 0.75, 0.85];

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.min_duration_h && self.min_duration_h < self.max_duration_h) {
            return Err(Error::Validation(format!(
                "need 0 < min_duration_h < max_duration_h, got {} / {}",
                self.min_duration_h, self.max_duration_h
            )));
        }
        if !(self.min_coverage > 0.0 && self.min_coverage <= 1.0) {
            return Err(Error::Validation(format!("min_coverage must lie in (0, 1], got {}", self.min_coverage)));
        }
        Ok(())
    }

    fn record_passes(&self, r: &SleepRecord, report: &mut ExclusionReport) -> bool {
        let d = r.duration_min as f64;
        if !(d > self.min_duration_h * 60.0 && d < self.max_duration_h * 60.0) {
            report.duration += 1;
            return false;
        }
        let (lo, hi) = self.onset_window.noon_relative_bounds();
        if !(r.onset_min > lo && r.onset_min < hi) {
            report.onset_timing += 1;
            return false;
        }
        let (lo, hi) = self.offset_window.noon_relative_bounds();
        if !(r.offset_min > lo && r.offset_min < hi) {
            report.offset_timing += 1;
            return false;
        }
        true
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub records_in: usize,
    pub duration: usize,
    pub onset_timing: usize,
    pub offset_timing: usize,
    pub users_in: usize,
    pub users_min_nights: usize,
    pub users_coverage: usize,
    pub records_kept: usize,
    pub users_kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserInclusion {
    pub nights: usize,
    /// Days from first to last kept record, inclusive.
    pub span_days: i64,
    pub coverage: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<SleepRecord>,
    pub users: BTreeMap<String, UserInclusion>,
    pub report: ExclusionReport,
}

/// Record-level duration and timing filters followed by user-level coverage filters.
pub fn apply_filters(records: &[SleepRecord], config: &InclusionConfig) -> FilterOutcome {
    let mut report = ExclusionReport {
        records_in: records.len(),
        ..Default::default()
    };
    let mut by_user: BTreeMap<&str, Vec<&SleepRecord>> = BTreeMap::new();
    for r in records {
        let entry = by_user.entry(r.user_id.as_str()).or_default();
        if config.record_passes(r, &mut report) {
            entry.push(r);
        }
    }
    report.users_in = by_user.len();

    let mut users = BTreeMap::new();
    let mut kept = Vec::new();
    for (user, mut recs) in by_user {
        recs.sort_by_key(|r| r.night_date);
        let nights = recs.len();
        let span_days = match (recs.first(), recs.last()) {
            (Some(a), Some(b)) => (b.night_date - a.night_date).num_days() + 1,
            _ => 0,
        };
        let coverage = if span_days > 0 { nights as f64 / span_days as f64 } else { 0.0 };
        let enough_nights = nights >= config.min_nights;
        let enough_coverage = coverage >= config.min_coverage;
        if !enough_nights {
            report.users_min_nights += 1;
        } else if !enough_coverage {
            report.users_coverage += 1;
        }
        let ok = enough_nights && enough_coverage;
        if ok {
            report.users_kept += 1;
            kept.extend(recs.into_iter().cloned());
        }
        users.insert(
            user.to_string(),
            UserInclusion {
                nights,
                span_days,
                coverage,
                kept: ok,
            },
        );
    }
    report.records_kept = kept.len();
    FilterOutcome { kept, users, report }
}

/// Short-sleep indicators for the `<7 h`, `<6 h` and `<5 h` thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortSleepFlags {
    pub lt7: bool,
    pub lt6: bool,
    pub lt5: bool,
}

pub fn short_sleep_flags(duration_min: u32) -> ShortSleepFlags {
    ShortSleepFlags {
        lt7: duration_min < 7 * 60,
        lt6: duration_min < 6 * 60,
        lt5: duration_min < 5 * 60,
    }
}

#[derive(Debug, Deserialize)]
struct EpochRow {
    user_id: String,
    timestamp_iso8601_with_offset: String,
    state: u8,
}

/// Write `epochs.csv`: `user_id, timestamp_iso8601_with_offset, state` with
/// state 1 for SLEEP.
pub fn write_epochs_csv<W: Write>(writer: W, streams: &[EpochStream]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_id", "timestamp_iso8601_with_offset", "state"])?;
    for s in streams {
        for e in &s.epochs {
            let state = match e.state {
                SleepState::Wake => "0",
                SleepState::Sleep => "1",
            };
            w.write_record([s.user_id.as_str(), e.timestamp.to_rfc3339().as_str(), state])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read `epochs.csv`, grouping rows by user in first-appearance order.
pub fn read_epochs_csv<R: Read>(reader: R, source: &str) -> Result<Vec<EpochStream>> {
    let mut order: Vec<String> = Vec::new();
    let mut streams: BTreeMap<String, (Vec<Epoch>, Vec<u64>)> = BTreeMap::new();
    for (line, row) in read_rows::<EpochRow, _>(reader, source)? {
        let bad = |message: String| Error::Schema {
            path: source.to_string(),
            line,
            message,
        };
        let ts = DateTime::parse_from_rfc3339(&row.timestamp_iso8601_with_offset)
            .map_err(|e| bad(format!("bad timestamp `{}`: {e}", row.timestamp_iso8601_with_offset)))?;
        let state = match row.state {
            0 => SleepState::Wake,
            1 => SleepState::Sleep,
            s => return Err(bad(format!("state must be 0 or 1, got {s}"))),
        };
        let entry = streams.entry(row.user_id.clone()).or_insert_with(|| {
            order.push(row.user_id.clone());
            (Vec::new(), Vec::new())
        });
        entry.0.push(Epoch { timestamp: ts, state });
        entry.1.push(line);
    }
    let mut out = Vec::with_capacity(order.len());
    for user in order {
        let (epochs, lines) = streams.remove(&user).expect("user seen");
        let stream = EpochStream { user_id: user, epochs };
        match check_stream(&stream) {
            Err(Error::NonMonotoneTimestamps { row, detail }) => {
                return Err(Error::Schema {
                    path: source.to_string(),
                    line: lines[row],
                    message: format!("timestamps must be strictly increasing per user ({detail})"),
                })
            }
            Err(Error::Validation(msg)) => {
                return Err(Error::Schema {
                    path: source.to_string(),
                    line: lines[0],
                    message: msg,
                })
            }
            _ => {}
        }
        out.push(stream);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordRow {
    user_id: String,
    night_date: NaiveDate,
    onset_min: i64,
    offset_min: i64,
    midsleep_min: f64,
    duration_min: u32,
    total24h_min: Option<u32>,
    flag_lt7: u8,
    flag_lt6: u8,
    flag_lt5: u8,
}

pub fn write_sleep_records_csv<W: Write>(writer: W, records: &[SleepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        let f = short_sleep_flags(r.duration_min);
        w.serialize(RecordRow {
            user_id: r.user_id.clone(),
            night_date: r.night_date,
            onset_min: r.onset_min,
            offset_min: r.offset_min,
            midsleep_min: r.midsleep_min,
            duration_min: r.duration_min,
            total24h_min: r.total24h_min,
            flag_lt7: f.lt7 as u8,
            flag_lt6: f.lt6 as u8,
            flag_lt5: f.lt5 as u8,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sleep_records_csv<R: Read>(reader: R, source: &str) -> Result<Vec<SleepRecord>> {
    let mut out = Vec::new();
    for (_, row) in read_rows::<RecordRow, _>(reader, source)? {
        let mut r = SleepRecord::new(row.user_id, row.night_date, row.onset_min, row.offset_min, row.duration_min);
        r.total24h_min = row.total24h_min;
        out.push(r);
    }
    Ok(out)
}
