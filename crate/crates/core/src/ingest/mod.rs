//! Raw meter CSV ingestion and the canonical per-account series.
//!
//! Input rows are `account_id,timestamp,energy_kwh` where the energy is the
//! consumption during the interval that *ends* at `timestamp`. Assembly groups
//! rows per account onto a uniform slot grid; holes in the grid become explicit
//! slots flagged [`QualityFlag::Missing`].

mod store;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use chrono::{Duration, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use store::{AccountEntry, CleanseStatus, Manifest, MeterStore, StoreError};

/// Timestamp layout used by every file this crate reads or writes.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M";

const HEADER: [&str; 3] = ["account_id", "timestamp", "energy_kwh"];

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("missing or malformed header, expected `account_id,timestamp,energy_kwh`")]
    MissingHeader,
    #[error("line {line}: bad timestamp `{value}`")]
    BadTimestamp { line: u64, value: String },
    #[error("line {line}: negative energy {value}")]
    NegativeEnergy { line: u64, value: f64 },
    #[error("line {line}: non-numeric energy `{value}`")]
    NonNumericEnergy { line: u64, value: String },
    #[error("line {line}: expected 3 fields, found {found}")]
    FieldCount { line: u64, found: usize },
    #[error("account {0}: reading gaps are not a regular 15 or 60 minute grid")]
    IrregularInterval(String),
    #[error("account {0} has no readings")]
    EmptyAccount(String),
    #[error("csv: {0}")]
    Csv(String),
}

/// One raw meter row.
#[derive(Debug, Clone, PartialEq)]
pub struct RawReading {
    pub account_id: String,
    pub timestamp: NaiveDateTime,
    pub energy_kwh: f64,
}

/// Sampling interval of a series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Interval {
    QuarterHour,
    Hour,
}

impl Interval {
    pub fn minutes(self) -> u32 {
        match self {
            Interval::QuarterHour => 15,
            Interval::Hour => 60,
        }
    }

    pub fn from_minutes(minutes: i64) -> Option<Self> {
        match minutes {
            15 => Some(Interval::QuarterHour),
            60 => Some(Interval::Hour),
            _ => None,
        }
    }

    pub fn duration(self) -> Duration {
        Duration::minutes(i64::from(self.minutes()))
    }

    /// Number of slots in a regular 24-hour day.
    pub fn slots_per_day(self) -> usize {
        (24 * 60 / self.minutes()) as usize
    }

    /// Number of slots covering `hours` hours, rounded down.
    pub fn slots_for_hours(self, hours: f64) -> usize {
        (hours * 60.0 / f64::from(self.minutes())).floor() as usize
    }

    pub fn hours(self, slots: usize) -> f64 {
        slots as f64 * f64::from(self.minutes()) / 60.0
    }
}

impl TryFrom<u32> for Interval {
    type Error = String;

    fn try_from(minutes: u32) -> Result<Self, Self::Error> {
        Interval::from_minutes(i64::from(minutes))
            .ok_or_else(|| format!("unsupported interval {minutes} minutes"))
    }
}

impl From<Interval> for u32 {
    fn from(interval: Interval) -> u32 {
        interval.minutes()
    }
}

/// Per-slot provenance. The declaration order is the severity order used when
/// slots are merged: `Missing > Estimated > YearAveraged > Interpolated > Observed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QualityFlag {
    Observed,
    Interpolated,
    YearAveraged,
    Estimated,
    Missing,
}

impl QualityFlag {
    pub const ALL: [QualityFlag; 5] = [
        QualityFlag::Observed,
        QualityFlag::Interpolated,
        QualityFlag::YearAveraged,
        QualityFlag::Estimated,
        QualityFlag::Missing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QualityFlag::Observed => "Observed",
            QualityFlag::Interpolated => "Interpolated",
            QualityFlag::YearAveraged => "YearAveraged",
            QualityFlag::Estimated => "Estimated",
            QualityFlag::Missing => "Missing",
        }
    }
}

impl fmt::Display for QualityFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QualityFlag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QualityFlag::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown quality flag `{s}`"))
    }
}

/// One account's readings on a uniform grid.
///
/// Slot `i` holds the energy of the interval ending at `start + i * interval`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadingSeries {
    pub account_id: String,
    pub interval: Interval,
    pub start: NaiveDateTime,
    pub values: Vec<f64>,
    pub flags: Vec<QualityFlag>,
}

impl ReadingSeries {
    pub fn new(
        account_id: impl Into<String>,
        interval: Interval,
        start: NaiveDateTime,
        values: Vec<f64>,
        flags: Vec<QualityFlag>,
    ) -> Self {
        assert_eq!(values.len(), flags.len(), "values and flags must align");
        Self {
            account_id: account_id.into(),
            interval,
            start,
            values,
            flags,
        }
    }

    /// A fully observed series.
    pub fn observed(
        account_id: impl Into<String>,
        interval: Interval,
        start: NaiveDateTime,
        values: Vec<f64>,
    ) -> Self {
        let flags = vec![QualityFlag::Observed; values.len()];
        Self::new(account_id, interval, start, values, flags)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Timestamp (interval end) of slot `i`.
    pub fn slot_time(&self, i: usize) -> NaiveDateTime {
        self.start + self.interval.duration() * i as i32
    }

    /// Start of the interval measured by slot `i`.
    pub fn interval_start(&self, i: usize) -> NaiveDateTime {
        self.slot_time(i) - self.interval.duration()
    }

    /// Timestamp of the last slot, if any.
    pub fn end(&self) -> Option<NaiveDateTime> {
        (!self.is_empty()).then(|| self.slot_time(self.len() - 1))
    }

    /// Slot index whose timestamp is exactly `t`.
    pub fn slot_of(&self, t: NaiveDateTime) -> Option<usize> {
        let offset = (t - self.start).num_minutes();
        let step = i64::from(self.interval.minutes());
        if offset < 0 || offset % step != 0 {
            return None;
        }
        let i = (offset / step) as usize;
        (i < self.len()).then_some(i)
    }

    pub fn count_flag(&self, flag: QualityFlag) -> usize {
        self.flags.iter().filter(|&&f| f == flag).count()
    }
}

/// Non-fatal notes produced while assembling series.
#[derive(Debug, Clone, PartialEq)]
pub enum AssemblyWarning {
    DuplicateTimestamp {
        account_id: String,
        timestamp: NaiveDateTime,
    },
}

impl fmt::Display for AssemblyWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssemblyWarning::DuplicateTimestamp {
                account_id,
                timestamp,
            } => write!(
                f,
                "account {account_id}: duplicate reading at {}, keeping the last one",
                timestamp.format(TIMESTAMP_FORMAT)
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub series: Vec<ReadingSeries>,
    pub warnings: Vec<AssemblyWarning>,
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    let t = NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
        .ok()?;
    (t.second() == 0 && t.nanosecond() == 0).then_some(t)
}

/// Parses the raw ingest CSV. Rows come back in file order.
pub fn parse_csv<R: Read>(input: R) -> Result<Vec<RawReading>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = reader.records();

    let header = match records.next() {
        Some(rec) => rec.map_err(|e| IngestError::Csv(e.to_string()))?,
        None => return Err(IngestError::MissingHeader),
    };
    let header: Vec<&str> = header
        .iter()
        .map(|h| h.trim_start_matches('\u{feff}'))
        .collect();
    if header != HEADER {
        return Err(IngestError::MissingHeader);
    }

    let mut out = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| IngestError::Csv(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != 3 {
            return Err(IngestError::FieldCount {
                line,
                found: rec.len(),
            });
        }
        let timestamp = parse_timestamp(&rec[1]).ok_or_else(|| IngestError::BadTimestamp {
            line,
            value: rec[1].to_string(),
        })?;
        let energy_kwh: f64 = rec[2]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| IngestError::NonNumericEnergy {
                line,
                value: rec[2].to_string(),
            })?;
        if energy_kwh < 0.0 {
            return Err(IngestError::NegativeEnergy {
                line,
                value: energy_kwh,
            });
        }
        out.push(RawReading {
            account_id: rec[0].to_string(),
            timestamp,
            energy_kwh,
        });
    }
    Ok(out)
}

/// Groups readings per account onto a uniform slot grid.
///
/// The interval is the modal gap between consecutive distinct timestamps (ties
/// go to the shorter gap). Every reading must then sit on that grid. Output is
/// ordered by account id.
pub fn assemble_series(readings: &[RawReading]) -> Result<Assembled, IngestError> {
    let mut per_account: BTreeMap<&str, Vec<(NaiveDateTime, usize)>> = BTreeMap::new();
    for (idx, r) in readings.iter().enumerate() {
        per_account
            .entry(r.account_id.as_str())
            .or_default()
            .push((r.timestamp, idx));
    }

    let mut series = Vec::with_capacity(per_account.len());
    let mut warnings = Vec::new();
    for (account, mut rows) in per_account {
        if rows.is_empty() {
            return Err(IngestError::EmptyAccount(account.to_string()));
        }
        // Stable on (timestamp, file position): the last duplicate wins below.
        rows.sort_unstable();
        let mut deduped: Vec<(NaiveDateTime, usize)> = Vec::with_capacity(rows.len());
        for row in rows {
            match deduped.last_mut() {
                Some(last) if last.0 == row.0 => {
                    warnings.push(AssemblyWarning::DuplicateTimestamp {
                        account_id: account.to_string(),
                        timestamp: row.0,
                    });
                    *last = row;
                }
                _ => deduped.push(row),
            }
        }

        let interval = infer_interval(account, &deduped)?;
        let step = i64::from(interval.minutes());
        let start = deduped[0].0;
        let last = deduped[deduped.len() - 1].0;
        let len = ((last - start).num_minutes() / step) as usize + 1;
        let mut values = vec![0.0; len];
        let mut flags = vec![QualityFlag::Missing; len];
        for (t, idx) in deduped {
            let offset = (t - start).num_minutes();
            if offset % step != 0 {
                return Err(IngestError::IrregularInterval(account.to_string()));
            }
            let slot = (offset / step) as usize;
            values[slot] = readings[idx].energy_kwh;
            flags[slot] = QualityFlag::Observed;
        }
        series.push(ReadingSeries::new(account, interval, start, values, flags));
    }
    Ok(Assembled { series, warnings })
}

fn infer_interval(account: &str, rows: &[(NaiveDateTime, usize)]) -> Result<Interval, IngestError> {
    if rows.len() == 1 {
        // No gap to measure; fall back on clock alignment.
        return match rows[0].0.minute() {
            0 => Ok(Interval::Hour),
            15 | 30 | 45 => Ok(Interval::QuarterHour),
            _ => Err(IngestError::IrregularInterval(account.to_string())),
        };
    }
    let mut counts: HashMap<i64, usize> = HashMap::new();
    for pair in rows.windows(2) {
        *counts
            .entry((pair[1].0 - pair[0].0).num_minutes())
            .or_default() += 1;
    }
    let modal = counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(gap, _)| gap)
        .unwrap_or_default();
    Interval::from_minutes(modal).ok_or_else(|| IngestError::IrregularInterval(account.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> NaiveDateTime {
        parse_timestamp(s).unwrap()
    }

    fn reading(account: &str, t: &str, v: f64) -> RawReading {
        RawReading {
            account_id: account.into(),
            timestamp: ts(t),
            energy_kwh: v,
        }
    }

    #[test]
    fn parses_a_row() {
        let csv = "account_id,timestamp,energy_kwh\nA17,2009-06-01T00:00,3.25\n";
        let rows = parse_csv(csv.as_bytes()).unwrap();
        assert_eq!(rows, vec![reading("A17", "2009-06-01T00:00", 3.25)]);
    }

    #[test]
    fn negative_energy_reports_line() {
        let csv =
            "account_id,timestamp,energy_kwh\nA17,2009-06-01T00:00,1\nA17,2009-06-01T01:00,-1.0\n";
        assert_eq!(
            parse_csv(csv.as_bytes()),
            Err(IngestError::NegativeEnergy {
                line: 3,
                value: -1.0
            })
        );
    }

    #[test]
    fn header_only_is_empty() {
        let rows = parse_csv("account_id,timestamp,energy_kwh\n".as_bytes()).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn header_problems() {
        assert_eq!(parse_csv("".as_bytes()), Err(IngestError::MissingHeader));
        assert_eq!(
            parse_csv("A17,2009-06-01T00:00,3.25\n".as_bytes()),
            Err(IngestError::MissingHeader)
        );
    }

    #[test]
    fn bad_fields() {
        let bad_ts = "account_id,timestamp,energy_kwh\nA,2009-06-01 00:00,1\n";
        assert!(matches!(
            parse_csv(bad_ts.as_bytes()),
            Err(IngestError::BadTimestamp { line: 2, .. })
        ));
        let seconds = "account_id,timestamp,energy_kwh\nA,2009-06-01T00:00:30,1\n";
        assert!(matches!(
            parse_csv(seconds.as_bytes()),
            Err(IngestError::BadTimestamp { line: 2, .. })
        ));
        let nan = "account_id,timestamp,energy_kwh\nA,2009-06-01T00:00,abc\n";
        assert!(matches!(
            parse_csv(nan.as_bytes()),
            Err(IngestError::NonNumericEnergy { line: 2, .. })
        ));
    }

    #[test]
    fn hole_is_materialized() {
        let rows = vec![
            reading("A", "2009-06-01T00:00", 1.0),
            reading("A", "2009-06-01T01:00", 2.0),
            reading("A", "2009-06-01T03:00", 4.0),
        ];
        let s = &assemble_series(&rows).unwrap().series[0];
        assert_eq!(s.interval, Interval::Hour);
        assert_eq!(s.values, vec![1.0, 2.0, 0.0, 4.0]);
        assert_eq!(s.flags[2], QualityFlag::Missing);
        assert_eq!(s.slot_time(2), ts("2009-06-01T02:00"));
    }

    #[test]
    fn quarter_hour_modal_gap() {
        let rows = vec![
            reading("A", "2009-06-01T00:00", 1.0),
            reading("A", "2009-06-01T00:15", 1.0),
            reading("A", "2009-06-01T00:30", 1.0),
        ];
        let s = &assemble_series(&rows).unwrap().series[0];
        assert_eq!(s.interval, Interval::QuarterHour);
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn irregular_gap_rejected() {
        let rows = vec![
            reading("A", "2009-06-01T00:00", 1.0),
            reading("A", "2009-06-01T00:07", 1.0),
        ];
        assert_eq!(
            assemble_series(&rows),
            Err(IngestError::IrregularInterval("A".into()))
        );
    }

    #[test]
    fn off_grid_reading_rejected() {
        let rows = vec![
            reading("A", "2009-06-01T00:00", 1.0),
            reading("A", "2009-06-01T01:00", 1.0),
            reading("A", "2009-06-01T02:00", 1.0),
            reading("A", "2009-06-01T02:30", 1.0),
            reading("A", "2009-06-01T04:00", 1.0),
        ];
        assert!(matches!(
            assemble_series(&rows),
            Err(IngestError::IrregularInterval(_))
        ));
    }

    #[test]
    fn duplicate_keeps_last_and_warns() {
        let rows = vec![
            reading("A", "2009-06-01T00:00", 1.0),
            reading("A", "2009-06-01T01:00", 2.0),
            reading("A", "2009-06-01T00:00", 9.0),
        ];
        let out = assemble_series(&rows).unwrap();
        assert_eq!(out.series[0].values, vec![9.0, 2.0]);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn accounts_sorted_and_separated() {
        let rows = vec![
            reading("B", "2009-06-01T00:00", 1.0),
            reading("A", "2009-06-01T00:00", 2.0),
            reading("B", "2009-06-01T01:00", 3.0),
        ];
        let out = assemble_series(&rows).unwrap();
        let ids: Vec<_> = out.series.iter().map(|s| s.account_id.as_str()).collect();
        assert_eq!(ids, ["A", "B"]);
        assert_eq!(out.series[1].values, vec![1.0, 3.0]);
    }

    #[test]
    fn slot_arithmetic() {
        let s = ReadingSeries::observed(
            "A",
            Interval::QuarterHour,
            ts("2009-06-01T00:15"),
            vec![0.0; 10],
        );
        for i in 0..s.len() {
            assert_eq!(s.slot_time(i), s.start + Duration::minutes(15 * i as i64));
            assert_eq!(s.slot_of(s.slot_time(i)), Some(i));
        }
        assert_eq!(s.slot_of(ts("2009-06-01T00:20")), None);
        assert_eq!(s.interval_start(0), ts("2009-06-01T00:00"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn assembly_is_permutation_invariant(
                present in proptest::collection::vec(any::<bool>(), 2..60),
                seed in any::<u64>(),
            ) {
                let base = ts("2010-01-01T00:00");
                let mut rows: Vec<RawReading> = present
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p)
                    .flat_map(|(i, _)| {
                        ["X", "Y"].into_iter().map(move |acct| RawReading {
                            account_id: acct.into(),
                            timestamp: base + Duration::hours(i as i64),
                            energy_kwh: i as f64 * 0.5,
                        })
                    })
                    .collect();
                prop_assume!(rows.len() >= 4);
                // irregular inputs must fail the same way in any order
                let expected = assemble_series(&rows);
                // deterministic shuffle
                let mut state = seed | 1;
                for i in (1..rows.len()).rev() {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    rows.swap(i, (state % (i as u64 + 1)) as usize);
                }
                prop_assert_eq!(assemble_series(&rows), expected);
            }
        }
    }
}
