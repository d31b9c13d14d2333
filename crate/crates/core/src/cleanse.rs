//! Gap filling, estimated-read detection and account screening.
//!
//! Per account the pipeline runs: detect estimated runs, resolve them (short
//! runs interpolated, long runs excised and refilled from other years), then
//! fill gaps until nothing changes (short gaps linearly, the rest from other
//! years), then decide whether the account is usable at all.
//!
//! Only [`QualityFlag::Observed`] slots ever seed a fill, so filling order does
//! not leak synthetic values into other synthetic values across years.

use std::collections::BTreeMap;

use chrono::Datelike;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::ingest::{CleanseStatus, MeterStore, QualityFlag, ReadingSeries, StoreError};

#[derive(Debug, Error)]
pub enum CleanseError {
    #[error("gap of {length} slots exceeds the {max}-slot linear fill limit")]
    GapTooLong { length: usize, max: usize },
    #[error("gap at slot {start_slot} has no observed neighbor on both sides")]
    BoundaryMissing { start_slot: usize },
    #[error("no other year covers any slot of the gap at slot {start_slot}")]
    NoSiblingCoverage { start_slot: usize },
    #[error("invalid cleanse config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanseConfig {
    /// Longest gap, in hours, filled by straight-line interpolation.
    pub short_gap_max_hours: f64,
    /// Minimum length of an identical-value run to be treated as estimated.
    pub est_run_threshold_slots: usize,
    /// Estimated runs longer than this are excised instead of interpolated.
    pub est_long_max_hours: f64,
    /// Drop an account when more than this fraction of slots is not Observed.
    pub drop_quality_frac: f64,
    /// Runs of exact zeros are never treated as estimates.
    pub zero_run_exempt: bool,
}

impl Default for CleanseConfig {
    fn default() -> Self {
        Self {
            short_gap_max_hours: 6.0,
            est_run_threshold_slots: 12,
            est_long_max_hours: 24.0,
            drop_quality_frac: 0.20,
            zero_run_exempt: true,
        }
    }
}

impl CleanseConfig {
    pub fn validate(&self) -> Result<(), CleanseError> {
        let bad = |msg: &str| Err(CleanseError::InvalidConfig(msg.to_string()));
        if !(self.short_gap_max_hours > 0.0) {
            return bad("short_gap_max_hours must be positive");
        }
        if self.est_run_threshold_slots == 0 {
            return bad("est_run_threshold_slots must be positive");
        }
        if !(self.est_long_max_hours > 0.0) {
            return bad("est_long_max_hours must be positive");
        }
        if !(0.0..=1.0).contains(&self.drop_quality_frac) {
            return bad("drop_quality_frac must lie in [0, 1]");
        }
        Ok(())
    }
}

/// A maximal run of Missing slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gap {
    pub account_id: String,
    pub start_slot: usize,
    pub length_slots: usize,
}

impl Gap {
    fn end(&self) -> usize {
        self.start_slot + self.length_slots
    }
}

/// A maximal run of identical observed values at least as long as the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedRun {
    pub account_id: String,
    pub start_slot: usize,
    pub length_slots: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assessment {
    pub keep: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanseReport {
    pub config: CleanseConfig,
    pub kept: usize,
    pub dropped: usize,
    pub accounts: BTreeMap<String, CleanseStatus>,
}

pub fn detect_gaps(series: &ReadingSeries) -> Vec<Gap> {
    runs_where(&series.flags, |f| f == QualityFlag::Missing)
        .map(|(start_slot, length_slots)| Gap {
            account_id: series.account_id.clone(),
            start_slot,
            length_slots,
        })
        .collect()
}

/// Maximal runs `(start, len)` of slots satisfying `pred`.
fn runs_where<'a>(
    flags: &'a [QualityFlag],
    pred: impl Fn(QualityFlag) -> bool + 'a,
) -> impl Iterator<Item = (usize, usize)> + 'a {
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < flags.len() && !pred(flags[i]) {
            i += 1;
        }
        if i >= flags.len() {
            return None;
        }
        let start = i;
        while i < flags.len() && pred(flags[i]) {
            i += 1;
        }
        Some((start, i - start))
    })
}

fn boundaries(series: &ReadingSeries, start: usize, end: usize) -> Option<(f64, f64)> {
    let usable = |f: QualityFlag| !matches!(f, QualityFlag::Missing | QualityFlag::Estimated);
    if start == 0 || end >= series.len() {
        return None;
    }
    (usable(series.flags[start - 1]) && usable(series.flags[end]))
        .then(|| (series.values[start - 1], series.values[end]))
}

fn interpolate(series: &mut ReadingSeries, start: usize, end: usize, left: f64, right: f64) {
    let steps = (end - start + 1) as f64;
    for i in start..end {
        let t = (i - start + 1) as f64 / steps;
        series.values[i] = left + (right - left) * t;
        series.flags[i] = QualityFlag::Interpolated;
    }
}

/// Fills `gap` on the straight line between its two neighbors.
pub fn fill_gap_linear(
    series: &mut ReadingSeries,
    gap: &Gap,
    config: &CleanseConfig,
) -> Result<(), CleanseError> {
    let max = series.interval.slots_for_hours(config.short_gap_max_hours);
    if gap.length_slots > max {
        return Err(CleanseError::GapTooLong {
            length: gap.length_slots,
            max,
        });
    }
    let (left, right) =
        boundaries(series, gap.start_slot, gap.end()).ok_or(CleanseError::BoundaryMissing {
            start_slot: gap.start_slot,
        })?;
    interpolate(series, gap.start_slot, gap.end(), left, right);
    Ok(())
}

/// Fills each gap slot with the mean of the observed values at the same
/// (month, day, time) in other years, drawn from this series and `siblings`.
///
/// Slots with no coverage stay Missing. Returns the number of slots filled.
pub fn fill_gap_cross_year(
    series: &mut ReadingSeries,
    gap: &Gap,
    siblings: &[&ReadingSeries],
) -> Result<usize, CleanseError> {
    let fills: Vec<(usize, f64)> = {
        let own: &ReadingSeries = series;
        let sources: Vec<&ReadingSeries> = std::iter::once(own)
            .chain(
                siblings
                    .iter()
                    .copied()
                    .filter(|s| s.interval == own.interval),
            )
            .collect();
        (gap.start_slot..gap.end().min(own.len()))
            .filter(|&i| own.flags[i] == QualityFlag::Missing)
            .filter_map(|i| {
                let t = own.slot_time(i);
                let mut sum = 0.0;
                let mut count = 0usize;
                for src in &sources {
                    let Some(last) = src.end() else {
                        continue;
                    };
                    for year in src.start.year()..=last.year() {
                        if year == t.year() {
                            continue;
                        }
                        let Some(other) = t.with_year(year) else {
                            continue;
                        };
                        if let Some(j) = src.slot_of(other) {
                            if src.flags[j] == QualityFlag::Observed {
                                sum += src.values[j];
                                count += 1;
                            }
                        }
                    }
                }
                (count > 0).then(|| (i, sum / count as f64))
            })
            .collect()
    };
    if fills.is_empty() {
        return Err(CleanseError::NoSiblingCoverage {
            start_slot: gap.start_slot,
        });
    }
    for &(i, v) in &fills {
        series.values[i] = v;
        series.flags[i] = QualityFlag::YearAveraged;
    }
    Ok(fills.len())
}

pub fn detect_estimated_runs(series: &ReadingSeries, config: &CleanseConfig) -> Vec<EstimatedRun> {
    let mut out = Vec::new();
    let n = series.len();
    let mut i = 0;
    while i < n {
        if series.flags[i] != QualityFlag::Observed {
            i += 1;
            continue;
        }
        let value = series.values[i];
        let start = i;
        while i < n && series.flags[i] == QualityFlag::Observed && series.values[i] == value {
            i += 1;
        }
        let len = i - start;
        let exempt = config.zero_run_exempt && value == 0.0;
        if len >= config.est_run_threshold_slots && !exempt {
            out.push(EstimatedRun {
                account_id: series.account_id.clone(),
                start_slot: start,
                length_slots: len,
                value,
            });
        }
    }
    out
}

/// Slot counts produced by [`resolve_estimated_runs`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Resolution {
    pub interpolated: usize,
    pub excised: usize,
}

pub fn resolve_estimated_runs(
    series: &mut ReadingSeries,
    runs: &[EstimatedRun],
    config: &CleanseConfig,
    siblings: &[&ReadingSeries],
) -> Resolution {
    for run in runs {
        series.flags[run.start_slot..run.start_slot + run.length_slots]
            .fill(QualityFlag::Estimated);
    }
    let mut resolution = Resolution::default();
    let mut excised = Vec::new();
    for run in runs {
        let (start, end) = (run.start_slot, run.start_slot + run.length_slots);
        let short = series.interval.hours(run.length_slots) <= config.est_long_max_hours;
        match boundaries(series, start, end).filter(|_| short) {
            Some((left, right)) => {
                interpolate(series, start, end, left, right);
                resolution.interpolated += run.length_slots;
            }
            None => {
                series.values[start..end].fill(0.0);
                series.flags[start..end].fill(QualityFlag::Missing);
                resolution.excised += run.length_slots;
                excised.push(Gap {
                    account_id: series.account_id.clone(),
                    start_slot: start,
                    length_slots: run.length_slots,
                });
            }
        }
    }
    for gap in &excised {
        // Uncovered slots simply stay Missing.
        let _ = fill_gap_cross_year(series, gap, siblings);
    }
    resolution
}

pub fn assess_account(series: &ReadingSeries, config: &CleanseConfig) -> Assessment {
    let missing = series.count_flag(QualityFlag::Missing);
    if missing > 0 {
        return Assessment {
            keep: false,
            reason: Some(format!("{missing} slots remain missing")),
        };
    }
    let non_observed = series.len() - series.count_flag(QualityFlag::Observed);
    let frac = if series.is_empty() {
        0.0
    } else {
        non_observed as f64 / series.len() as f64
    };
    if frac > config.drop_quality_frac {
        return Assessment {
            keep: false,
            reason: Some(format!(
                "{:.1}% of slots not observed (limit {:.1}%)",
                frac * 100.0,
                config.drop_quality_frac * 100.0
            )),
        };
    }
    Assessment {
        keep: true,
        reason: None,
    }
}

/// Fills gaps until a pass changes nothing. Returns the slots filled.
fn fill_gaps(
    series: &mut ReadingSeries,
    config: &CleanseConfig,
    siblings: &[&ReadingSeries],
) -> usize {
    let mut filled = 0;
    loop {
        let before = series.count_flag(QualityFlag::Missing);
        for gap in detect_gaps(series) {
            match fill_gap_linear(series, &gap, config) {
                Ok(()) => {}
                Err(CleanseError::GapTooLong { .. } | CleanseError::BoundaryMissing { .. }) => {
                    let _ = fill_gap_cross_year(series, &gap, siblings);
                }
                Err(e) => unreachable!("linear fill cannot fail with {e}"),
            }
        }
        let after = series.count_flag(QualityFlag::Missing);
        filled += before - after;
        if after == before {
            return filled;
        }
    }
}

/// Runs the whole per-account procedure on one series.
///
/// `previously_excised` carries the excision count from earlier passes so that
/// the returned status is cumulative.
pub fn cleanse_series(
    series: &mut ReadingSeries,
    config: &CleanseConfig,
    previously_excised: usize,
) -> CleanseStatus {
    let runs = detect_estimated_runs(series, config);
    let resolution = resolve_estimated_runs(series, &runs, config, &[]);
    let filled = fill_gaps(series, config, &[]);
    debug!(
        account = %series.account_id,
        runs = runs.len(),
        excised = resolution.excised,
        filled,
        "cleansed"
    );
    let assessment = assess_account(series, config);
    CleanseStatus {
        interpolated: series.count_flag(QualityFlag::Interpolated),
        year_averaged: series.count_flag(QualityFlag::YearAveraged),
        estimated_excised: previously_excised + resolution.excised,
        missing_remaining: series.count_flag(QualityFlag::Missing),
        dropped: !assessment.keep,
        drop_reason: assessment.reason,
    }
}

/// Cleanses every account in the store, writes the series back and persists
/// `cleanse_report.json`.
pub fn cleanse_pipeline(
    store: &mut MeterStore,
    config: &CleanseConfig,
) -> Result<CleanseReport, CleanseError> {
    config.validate()?;
    let ids: Vec<String> = store.accounts().map(str::to_string).collect();
    let shared: &MeterStore = store;
    let results: Vec<(ReadingSeries, CleanseStatus)> = ids
        .par_iter()
        .map(|id| {
            let mut series = shared.load_series(id)?;
            let previously = shared
                .entry(id)
                .and_then(|e| e.cleansing.as_ref())
                .map_or(0, |c| c.estimated_excised);
            let status = cleanse_series(&mut series, config, previously);
            Ok((series, status))
        })
        .collect::<Result<_, StoreError>>()?;

    let statuses: BTreeMap<String, CleanseStatus> = results
        .iter()
        .map(|(s, status)| (s.account_id.clone(), status.clone()))
        .collect();
    let series: Vec<ReadingSeries> = results.into_iter().map(|(s, _)| s).collect();
    store.store_cleansed(&series, &statuses)?;

    let dropped = statuses.values().filter(|s| s.dropped).count();
    let report = CleanseReport {
        config: config.clone(),
        kept: statuses.len() - dropped,
        dropped,
        accounts: statuses,
    };
    store.write_json("cleanse_report.json", &report)?;
    info!(
        kept = report.kept,
        dropped = report.dropped,
        "cleanse pipeline finished"
    );
    Ok(report)
}
