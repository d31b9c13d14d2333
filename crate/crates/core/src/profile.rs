//! Calendar-averaged, peak-normalized 24-hour profiles.
//!
//! A profile is built per account: quarter-hour series are summed to hours,
//! the days matching a [`CalendarFilter`] are selected, averaged slot by slot
//! and divided by their own peak. Day membership follows the interval a slot
//! measures, so the reading stamped `01:00` is the `00:00-01:00` slot of that
//! day and the reading stamped `00:00` closes the previous day.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{Read, Write};

use chrono::{Datelike, Duration, NaiveDate, Timelike, Weekday};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Interval, MeterStore, QualityFlag, ReadingSeries, StoreError};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("expected a 15-minute series, got {0} minutes")]
    WrongInterval(u32),
    #[error("no complete day matches the filter")]
    NoMatchingDays,
    #[error("cannot average an empty set of days")]
    EmptyDays,
    #[error("day vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("profile is all zeros")]
    AllZeroProfile,
    #[error("invalid calendar filter: {0}")]
    InvalidFilter(String),
    #[error("profile file line {line}: {reason}")]
    Format { line: u64, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DayKind {
    Weekdays,
    Weekends,
    AllDays,
    /// Kept sorted Monday first and free of repeats by [`CalendarFilter::new`].
    Explicit(Vec<Weekday>),
}

impl DayKind {
    pub fn contains(&self, day: Weekday) -> bool {
        let weekend = matches!(day, Weekday::Sat | Weekday::Sun);
        match self {
            DayKind::Weekdays => !weekend,
            DayKind::Weekends => weekend,
            DayKind::AllDays => true,
            DayKind::Explicit(days) => days.contains(&day),
        }
    }

    fn tag(&self) -> String {
        match self {
            DayKind::Weekdays => "weekdays".into(),
            DayKind::Weekends => "weekends".into(),
            DayKind::AllDays => "all".into(),
            DayKind::Explicit(days) => days
                .iter()
                .map(|d| d.to_string().to_lowercase())
                .collect::<Vec<_>>()
                .join("+"),
        }
    }
}

/// Which days of the record go into a profile, e.g. weekdays of June.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalendarFilter {
    pub months: BTreeSet<u32>,
    pub day_kind: DayKind,
    pub years: Option<BTreeSet<i32>>,
    pub label: String,
}

impl CalendarFilter {
    pub fn new(
        months: impl IntoIterator<Item = u32>,
        day_kind: DayKind,
    ) -> Result<Self, ProfileError> {
        let months: BTreeSet<u32> = months.into_iter().collect();
        if months.is_empty() {
            return Err(ProfileError::InvalidFilter("no months selected".into()));
        }
        if let Some(bad) = months.iter().find(|m| !(1..=12).contains(*m)) {
            return Err(ProfileError::InvalidFilter(format!(
                "month {bad} out of range"
            )));
        }
        let day_kind = match day_kind {
            DayKind::Explicit(d) if d.is_empty() => {
                return Err(ProfileError::InvalidFilter("no weekdays selected".into()));
            }
            DayKind::Explicit(mut d) => {
                d.sort_by_key(|w| w.num_days_from_monday());
                d.dedup();
                DayKind::Explicit(d)
            }
            other => other,
        };
        let mut filter = Self {
            months,
            day_kind,
            years: None,
            label: String::new(),
        };
        filter.label = filter.default_label();
        Ok(filter)
    }

    pub fn with_years(mut self, years: impl IntoIterator<Item = i32>) -> Self {
        let years: BTreeSet<i32> = years.into_iter().collect();
        self.years = (!years.is_empty()).then_some(years);
        self.label = self.default_label();
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    fn default_label(&self) -> String {
        let join = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(",");
        let mut label = format!(
            "m{}-{}",
            join(&mut self.months.iter().map(u32::to_string)),
            self.day_kind.tag()
        );
        if let Some(years) = &self.years {
            let _ = write!(label, "-y{}", join(&mut years.iter().map(i32::to_string)));
        }
        label
    }

    pub fn matches(&self, date: NaiveDate) -> bool {
        self.months.contains(&date.month())
            && self.day_kind.contains(date.weekday())
            && self.years.as_ref().is_none_or(|y| y.contains(&date.year()))
    }
}

/// One complete calendar day of readings.
#[derive(Debug, Clone, PartialEq)]
pub struct DayVector {
    pub date: NaiveDate,
    pub values: Vec<f64>,
}

impl AsRef<[f64]> for DayVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// An account's representative day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyProfile {
    pub account_id: String,
    pub filter_label: String,
    pub values: Vec<f64>,
    pub normalized: bool,
    /// Peak of the averaged profile before normalization.
    pub norm_max: f64,
    pub day_count: usize,
}

impl DailyProfile {
    pub fn n(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedAccount {
    pub account_id: String,
    pub reason: String,
}

/// The clustering input: one profile per usable account, ordered by account id.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet {
    pub label: String,
    pub filter: Option<CalendarFilter>,
    pub profiles: Vec<DailyProfile>,
    pub skipped: Vec<SkippedAccount>,
}

impl ProfileSet {
    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    /// Slots per profile, or 0 when empty.
    pub fn n(&self) -> usize {
        self.profiles.first().map_or(0, DailyProfile::n)
    }

    pub fn account_ids(&self) -> impl Iterator<Item = &str> {
        self.profiles.iter().map(|p| p.account_id.as_str())
    }

    pub fn get(&self, account_id: &str) -> Option<&DailyProfile> {
        self.profiles
            .binary_search_by(|p| p.account_id.as_str().cmp(account_id))
            .ok()
            .map(|i| &self.profiles[i])
            .or_else(|| self.profiles.iter().find(|p| p.account_id == account_id))
    }

    /// Builds a set from loose profiles, sorting them by account id.
    pub fn from_profiles(label: impl Into<String>, mut profiles: Vec<DailyProfile>) -> Self {
        profiles.sort_by(|a, b| a.account_id.cmp(&b.account_id));
        Self {
            label: label.into(),
            filter: None,
            profiles,
            skipped: Vec::new(),
        }
    }

    /// `account_id,filter_label,day_count,norm_max,v00,...`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ProfileError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "account_id".to_string(),
            "filter_label".into(),
            "day_count".into(),
            "norm_max".into(),
        ];
        header.extend((0..self.n()).map(|j| format!("v{j:02}")));
        w.write_record(&header).map_err(csv_io)?;
        for p in &self.profiles {
            let mut row = vec![
                p.account_id.clone(),
                p.filter_label.clone(),
                p.day_count.to_string(),
                p.norm_max.to_string(),
            ];
            row.extend(p.values.iter().map(f64::to_string));
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a profile file. A profile whose peak is 1 reads back as normalized.
    pub fn read_csv<R: Read>(input: R) -> Result<Self, ProfileError> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(input);
        let header = r.headers().map_err(|e| format_err(1, e))?.clone();
        let fixed = ["account_id", "filter_label", "day_count", "norm_max"];
        if header.len() < 5 || header.iter().take(4).ne(fixed) {
            return Err(ProfileError::Format {
                line: 1,
                reason: "expected account_id,filter_label,day_count,norm_max,v00,...".into(),
            });
        }
        let n = header.len() - 4;
        let mut profiles = Vec::new();
        let mut label = String::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| format_err(0, e))?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != n + 4 {
                return Err(ProfileError::Format {
                    line,
                    reason: format!("expected {} fields", n + 4),
                });
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format_err(line, e));
            let values = rec.iter().skip(4).map(num).collect::<Result<Vec<_>, _>>()?;
            let peak = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if label.is_empty() {
                label = rec[1].to_string();
            }
            profiles.push(DailyProfile {
                account_id: rec[0].to_string(),
                filter_label: rec[1].to_string(),
                day_count: rec[2].parse().map_err(|e| format_err(line, e))?,
                norm_max: num(&rec[3])?,
                normalized: (peak - 1.0).abs() <= 1e-12,
                values,
            });
        }
        Ok(Self::from_profiles(label, profiles))
    }
}

fn csv_io(e: csv::Error) -> ProfileError {
    ProfileError::Io(std::io::Error::other(e))
}

fn format_err(line: u64, e: impl std::fmt::Display) -> ProfileError {
    ProfileError::Format {
        line,
        reason: e.to_string(),
    }
}

/// Sums a 15-minute series into hours aligned on the clock.
///
/// Each hour takes the most severe flag among its four quarters. Quarters
/// outside the series are padded as Missing.
pub fn aggregate_hourly(series: &ReadingSeries) -> Result<ReadingSeries, ProfileError> {
    if series.interval != Interval::QuarterHour {
        return Err(ProfileError::WrongInterval(series.interval.minutes()));
    }
    // The quarter stamped hh:00 closes an hour; pad the head so groups end there.
    let head = ((series.start.minute() / 15 + 3) % 4) as usize;
    let total = head + series.len();
    let hours = total.div_ceil(4);
    let quarter = |k: usize| -> (f64, QualityFlag) {
        match k.checked_sub(head).filter(|&i| i < series.len()) {
            Some(i) => (series.values[i], series.flags[i]),
            None => (0.0, QualityFlag::Missing),
        }
    };
    let mut values = Vec::with_capacity(hours);
    let mut flags = Vec::with_capacity(hours);
    for h in 0..hours {
        let mut sum = 0.0;
        let mut flag = QualityFlag::Observed;
        for k in 4 * h..4 * h + 4 {
            let (v, f) = quarter(k);
            sum += v;
            flag = flag.max(f);
        }
        values.push(sum);
        flags.push(flag);
    }
    let start = series.start - Duration::minutes(15 * head as i64) + Duration::minutes(45);
    Ok(ReadingSeries::new(
        series.account_id.clone(),
        Interval::Hour,
        start,
        values,
        flags,
    ))
}

/// Complete, gap-free days matching `filter`, in date order.
pub fn select_days(
    series: &ReadingSeries,
    filter: &CalendarFilter,
) -> Result<Vec<DayVector>, ProfileError> {
    let per_day = series.interval.slots_per_day();
    let step = series.interval.minutes();
    let mut days = Vec::new();
    let mut i = 0;
    while i < series.len() {
        let begins = series.interval_start(i);
        let slot_of_day = ((begins.hour() * 60 + begins.minute()) / step) as usize;
        if slot_of_day != 0 || i + per_day > series.len() {
            // partial leading day, or not enough slots left for a whole day
            i += if slot_of_day != 0 {
                per_day - slot_of_day
            } else {
                per_day
            };
            continue;
        }
        let date = begins.date();
        let span = i..i + per_day;
        let complete = series.interval_start(span.end - 1).date() == date;
        if complete
            && filter.matches(date)
            && series.flags[span.clone()]
                .iter()
                .all(|&f| f != QualityFlag::Missing)
        {
            days.push(DayVector {
                date,
                values: series.values[span].to_vec(),
            });
        }
        i += per_day;
    }
    if days.is_empty() {
        return Err(ProfileError::NoMatchingDays);
    }
    Ok(days)
}

/// Slot-wise mean of the given days.
///
/// Each slot's values are summed in sorted order, so the result does not depend
/// on the order of `days`.
pub fn average_profile<D: AsRef<[f64]>>(
    account_id: impl Into<String>,
    filter_label: impl Into<String>,
    days: &[D],
) -> Result<DailyProfile, ProfileError> {
    let first = days.first().ok_or(ProfileError::EmptyDays)?.as_ref();
    let n = first.len();
    if let Some(bad) = days.iter().find(|d| d.as_ref().len() != n) {
        return Err(ProfileError::LengthMismatch(n, bad.as_ref().len()));
    }
    let mut column = Vec::with_capacity(days.len());
    let values: Vec<f64> = (0..n)
        .map(|j| {
            column.clear();
            column.extend(days.iter().map(|d| d.as_ref()[j]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / days.len() as f64
        })
        .collect();
    let norm_max = values.iter().copied().fold(0.0, f64::max);
    Ok(DailyProfile {
        account_id: account_id.into(),
        filter_label: filter_label.into(),
        values,
        normalized: false,
        norm_max,
        day_count: days.len(),
    })
}

/// Divides a profile by its own peak. Already-normalized profiles pass through.
pub fn normalize_profile(profile: &DailyProfile) -> Result<DailyProfile, ProfileError> {
    if profile.normalized {
        return Ok(profile.clone());
    }
    let peak = profile.values.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(ProfileError::AllZeroProfile);
    }
    Ok(DailyProfile {
        values: profile.values.iter().map(|v| v / peak).collect(),
        normalized: true,
        norm_max: peak,
        ..profile.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfileOptions {
    pub normalize: bool,
    /// Sum 15-minute series to hours (n = 24). When off, profiles keep 96
    /// slots and hourly accounts are skipped.
    pub aggregate_hourly: bool,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            normalize: true,
            aggregate_hourly: true,
        }
    }
}

/// Builds one profile per kept account in the store.
pub fn build_profiles(
    store: &MeterStore,
    filter: &CalendarFilter,
    options: ProfileOptions,
) -> Result<ProfileSet, ProfileError> {
    let ids: Vec<&str> = store
        .manifest()
        .accounts
        .iter()
        .filter(|(_, e)| !e.is_dropped())
        .map(|(id, _)| id.as_str())
        .collect();

    let outcomes: Vec<Result<DailyProfile, SkippedAccount>> = ids
        .par_iter()
        .map(|&id| -> Result<_, ProfileError> {
            let series = store.load_series(id)?;
            Ok(
                profile_for(&series, filter, options).map_err(|reason| SkippedAccount {
                    account_id: id.to_string(),
                    reason,
                }),
            )
        })
        .collect::<Result<_, _>>()?;

    let mut profiles = Vec::new();
    let mut skipped = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(p) => profiles.push(p),
            Err(s) => skipped.push(s),
        }
    }
    if !skipped.is_empty() {
        tracing::info!(skipped = skipped.len(), filter = %filter.label, "accounts without a profile");
    }
    Ok(ProfileSet {
        label: filter.label.clone(),
        filter: Some(filter.clone()),
        profiles,
        skipped,
    })
}

fn profile_for(
    series: &ReadingSeries,
    filter: &CalendarFilter,
    options: ProfileOptions,
) -> Result<DailyProfile, String> {
    let hourly;
    let series = match (series.interval, options.aggregate_hourly) {
        (Interval::QuarterHour, true) => {
            hourly = aggregate_hourly(series).map_err(|e| e.to_string())?;
            &hourly
        }
        (Interval::Hour, false) => return Err("hourly series cannot give 96-slot profiles".into()),
        _ => series,
    };
    let days = select_days(series, filter).map_err(|e| e.to_string())?;
    let profile =
        average_profile(&series.account_id, &filter.label, &days).map_err(|e| e.to_string())?;
    if options.normalize {
        normalize_profile(&profile).map_err(|e| e.to_string())
    } else {
        Ok(profile)
    }
}
