//! Synthetic meter datasets with planted load shapes and injected defects.
//!
//! Every account follows one base shape scaled by a random amplitude and
//! perturbed by multiplicative log-normal noise. Defects are logged in the
//! ground truth so that cleansing and clustering can be checked end to end.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Interval, TIMESTAMP_FORMAT};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterShape {
    /// Relative load for each hour of the day.
    pub base: Vec<f64>,
    pub share: f64,
    /// Inclusive range for the per-account amplitude.
    pub amplitude: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectRates {
    pub short_gap: f64,
    pub long_gap: f64,
    pub estimated_run: f64,
}

impl Default for DefectRates {
    fn default() -> Self {
        Self {
            short_gap: 0.0,
            long_gap: 0.0,
            estimated_run: 0.0,
        }
    }
}

/// Moves the first `accounts` members of one shape (in id order) onto
/// another shape from the first day of `start_month` in the first year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeShift {
    pub from_shape: usize,
    pub to_shape: usize,
    pub accounts: usize,
    pub start_month: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub account_count: usize,
    pub shapes: Vec<ClusterShape>,
    pub noise_sigma: f64,
    pub start_year: i32,
    pub years: u32,
    /// Inclusive month range; only allowed with a single year.
    pub months: Option<(u32, u32)>,
    pub interval: Interval,
    /// Probabilities per account-month.
    pub rates: DefectRates,
    pub short_gap_hours: f64,
    pub long_gap_hours: f64,
    pub est_run_slots: usize,
    /// Fraction of accounts that lose over a third of every month.
    pub degraded_share: f64,
    /// Rewrite the hidden values of short gaps onto the line between the
    /// readings on either side.
    pub linear_short_gaps: bool,
    pub shifts: Vec<ShapeShift>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            account_count: 100,
            shapes: default_shapes(5),
            noise_sigma: 0.05,
            start_year: 2009,
            years: 1,
            months: None,
            interval: Interval::Hour,
            rates: DefectRates::default(),
            short_gap_hours: 2.0,
            long_gap_hours: 72.0,
            est_run_slots: 12,
            degraded_share: 0.0,
            linear_short_gaps: false,
            shifts: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Equal shares over `clusters` archetypes, amplitudes 1 to 10.
    pub fn planted(account_count: usize, clusters: usize, seed: u64) -> Self {
        Self {
            account_count,
            shapes: default_shapes(clusters),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.account_count == 0 {
            return bad("account_count must be positive".into());
        }
        if self.shapes.is_empty() {
            return bad("at least one shape is required".into());
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if s.base.len() != 24 {
                return bad(format!("shape {i} has {} hours, expected 24", s.base.len()));
            }
            if s.base.iter().any(|v| !v.is_finite() || *v < 0.0) || !s.base.iter().any(|v| *v > 0.0)
            {
                return bad(format!(
                    "shape {i} needs finite non-negative values and a positive peak"
                ));
            }
            if !(s.share >= 0.0 && s.share <= 1.0) {
                return bad(format!("shape {i} share {} outside [0, 1]", s.share));
            }
            let (lo, hi) = s.amplitude;
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("shape {i} amplitude range ({lo}, {hi}) is invalid"));
            }
        }
        let total: f64 = self.shapes.iter().map(|s| s.share).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("shares sum to {total}, expected 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma {} must be finite and non-negative",
                self.noise_sigma
            ));
        }
        if self.years == 0 {
            return bad("years must be positive".into());
        }
        if let Some((a, b)) = self.months {
            if !(1..=12).contains(&a) || !(a..=12).contains(&b) {
                return bad(format!("month range {a}-{b} is invalid"));
            }
            if self.years > 1 {
                return bad("a month range needs years = 1 so the series stays contiguous".into());
            }
        }
        for (name, r) in [
            ("short_gap", self.rates.short_gap),
            ("long_gap", self.rates.long_gap),
            ("estimated_run", self.rates.estimated_run),
            ("degraded_share", self.degraded_share),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} rate {r} outside [0, 1]"));
            }
        }
        if self.interval.slots_for_hours(self.short_gap_hours) == 0
            || self.interval.slots_for_hours(self.long_gap_hours) == 0
            || self.est_run_slots == 0
        {
            return bad("defect lengths must cover at least one slot".into());
        }
        if self.long_gap_hours > 14.0 * 24.0 {
            return bad("long gaps may not exceed 14 days".into());
        }
        let (first, last) = self.months.unwrap_or((1, 12));
        for s in &self.shifts {
            if s.from_shape >= self.shapes.len() || s.to_shape >= self.shapes.len() {
                return bad(format!(
                    "shift refers to shape {} or {}",
                    s.from_shape, s.to_shape
                ));
            }
            if !(first..=last).contains(&s.start_month) {
                return bad(format!(
                    "shift month {} outside the generated months",
                    s.start_month
                ));
            }
        }
        Ok(())
    }
}

/// Open-hours archetypes on a non-zero base load, with a small ripple so
/// neighbouring hours never repeat a value.
pub fn default_shapes(count: usize) -> Vec<ClusterShape> {
    const ARCHETYPES: [(&[(usize, usize)], f64); 9] = [
        (&[(8, 10)], 0.2),
        (&[(16, 8)], 0.15),
        (&[(6, 12)], 0.5),
        (&[(0, 24)], 1.0),
        (&[(11, 12)], 0.1),
        (&[(21, 6)], 0.25),
        (&[(5, 6)], 0.3),
        (&[(7, 3), (17, 4)], 0.2),
        (&[(13, 3)], 0.4),
    ];
    (0..count)
        .map(|i| {
            let (open, base): (Vec<(usize, usize)>, f64) = match ARCHETYPES.get(i) {
                Some((o, b)) => (o.to_vec(), *b),
                None => (
                    vec![((i * 7) % 24, 3 + (i * 5) % 13)],
                    0.1 + 0.08 * (i % 6) as f64,
                ),
            };
            let values = (0..24)
                .map(|h| {
                    let on = open.iter().any(|&(s, d)| (h + 24 - s) % 24 < d);
                    let level = if on { 1.0 } else { base };
                    let ripple = 1.0 + 0.04 * ((h as f64 + 1.0) * 0.7 + i as f64).sin();
                    // the flat archetype gets a visible daily swell instead
                    if is_all_day(&open) {
                        level
                            * (0.8 + 0.2 * (std::f64::consts::PI * h as f64 / 23.0).sin())
                            * ripple
                    } else {
                        level * ripple
                    }
                })
                .collect();
            ClusterShape {
                base: values,
                share: 1.0 / count as f64,
                amplitude: (1.0, 10.0),
            }
        })
        .collect()
}

fn is_all_day(open: &[(usize, usize)]) -> bool {
    open.iter().any(|&(_, d)| d >= 24)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    ShortGap,
    LongGap,
    EstimatedRun,
    Degradation,
}

impl DefectKind {
    pub fn is_gap(self) -> bool {
        !matches!(self, DefectKind::EstimatedRun)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectRecord {
    pub kind: DefectKind,
    pub account_id: String,
    /// Timestamp of the first affected reading.
    pub start: NaiveDateTime,
    pub slots: usize,
    /// Values the defect hid or overwrote.
    pub truth: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub assignments: BTreeMap<String, usize>,
    /// Accounts moved by a shift, with their new shape.
    pub shifted: BTreeMap<String, usize>,
    pub degraded: BTreeSet<String>,
    pub defects: Vec<DefectRecord>,
}

impl GroundTruth {
    pub fn defects_of<'a>(
        &'a self,
        account_id: &'a str,
    ) -> impl Iterator<Item = &'a DefectRecord> + 'a {
        self.defects
            .iter()
            .filter(move |d| d.account_id == account_id)
    }
}

/// Splits `total` by `shares` with the largest-remainder method.
fn apportion(total: usize, shares: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .total_cmp(&(raw[a] - raw[a].floor()))
            .then(a.cmp(&b))
    });
    let short = total.saturating_sub(counts.iter().sum());
    for &i in order.iter().cycle().take(short) {
        counts[i] += 1;
    }
    counts
}

struct Timeline {
    start: NaiveDateTime,
    interval: Interval,
    slots: usize,
    /// Half-open slot ranges, one per calendar month.
    months: Vec<(usize, usize)>,
}

impl Timeline {
    fn new(spec: &SynthSpec) -> Self {
        let (first, last) = spec.months.unwrap_or((1, 12));
        let start = NaiveDate::from_ymd_opt(spec.start_year, first, 1).expect("valid month");
        let end_year = spec.start_year + spec.years as i32 - 1;
        let end = if last == 12 {
            NaiveDate::from_ymd_opt(end_year + 1, 1, 1)
        } else {
            NaiveDate::from_ymd_opt(end_year, last + 1, 1)
        }
        .expect("valid month");
        let per_day = spec.interval.slots_per_day();
        let mut months = Vec::new();
        let mut d = start;
        while d < end {
            let next = if d.month() == 12 {
                NaiveDate::from_ymd_opt(d.year() + 1, 1, 1)
            } else {
                NaiveDate::from_ymd_opt(d.year(), d.month() + 1, 1)
            }
            .expect("valid month");
            let a = (d - start).num_days() as usize * per_day;
            let b = (next - start).num_days() as usize * per_day;
            months.push((a, b));
            d = next;
        }
        let slots = months.last().map_or(0, |m| m.1);
        Self {
            start: start.and_hms_opt(0, 0, 0).expect("midnight"),
            interval: spec.interval,
            slots,
            months,
        }
    }

    fn interval_start(&self, slot: usize) -> NaiveDateTime {
        self.start + self.interval.duration() * slot as i32
    }

    fn reading_time(&self, slot: usize) -> NaiveDateTime {
        self.interval_start(slot + 1)
    }
}

struct Account {
    id: String,
    shape: usize,
    shifted_to: Option<(usize, NaiveDateTime)>,
    degraded: bool,
}

fn place(
    rng: &mut ChaCha8Rng,
    window: (usize, usize),
    len: usize,
    taken: &[(usize, usize)],
    margin: usize,
) -> Option<usize> {
    let lo = window.0;
    let hi = window.1.checked_sub(len)?;
    if hi < lo {
        return None;
    }
    for _ in 0..64 {
        let s = rng.random_range(lo..=hi);
        let clear = taken
            .iter()
            .all(|&(a, b)| s + len + margin <= a || s >= b + margin);
        if clear {
            return Some(s);
        }
    }
    None
}

fn generate_account(
    spec: &SynthSpec,
    tl: &Timeline,
    acct: &Account,
    stream: u64,
) -> (String, Vec<DefectRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let shape_amp = &spec.shapes[acct.shape];
    let (lo, hi) = shape_amp.amplitude;
    let amplitude = if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    };
    let noise = (spec.noise_sigma > 0.0).then(|| {
        LogNormal::new(-spec.noise_sigma * spec.noise_sigma / 2.0, spec.noise_sigma)
            .expect("valid sigma")
    });
    let per_hour = (60 / spec.interval.minutes()) as f64;

    let mut values: Vec<f64> = (0..tl.slots)
        .map(|t| {
            let at = tl.interval_start(t);
            let shape = match acct.shifted_to {
                Some((to, from)) if at >= from => to,
                _ => acct.shape,
            };
            let base = spec.shapes[shape].base[at.hour() as usize];
            let factor = noise.as_ref().map_or(1.0, |n| n.sample(&mut rng));
            amplitude * base * factor / per_hour
        })
        .collect();

    let per_day = spec.interval.slots_per_day();
    let interior = (per_day, tl.slots.saturating_sub(per_day));
    let mut taken: Vec<(usize, usize, DefectKind)> = Vec::new();
    let plans = [
        (
            DefectKind::ShortGap,
            spec.rates.short_gap,
            spec.interval.slots_for_hours(spec.short_gap_hours),
        ),
        (
            DefectKind::LongGap,
            spec.rates.long_gap,
            spec.interval.slots_for_hours(spec.long_gap_hours),
        ),
        (
            DefectKind::EstimatedRun,
            spec.rates.estimated_run,
            spec.est_run_slots,
        ),
    ];
    for &(ms, me) in &tl.months {
        let window = (ms.max(interior.0), me.min(interior.1));
        if acct.degraded {
            let len = ((me - ms) as f64 * 0.35).ceil() as usize;
            if window.1 >= window.0 + len {
                taken.push((window.0, window.0 + len, DefectKind::Degradation));
            }
            continue;
        }
        for &(kind, rate, len) in &plans {
            if rate > 0.0 && rng.random_bool(rate) {
                let spans: Vec<(usize, usize)> = taken.iter().map(|&(a, b, _)| (a, b)).collect();
                if let Some(s) = place(&mut rng, window, len, &spans, per_day) {
                    taken.push((s, s + len, kind));
                }
            }
        }
    }
    taken.sort();

    let mut missing = vec![false; tl.slots];
    let mut log = Vec::with_capacity(taken.len());
    for &(a, b, kind) in &taken {
        if kind == DefectKind::ShortGap && spec.linear_short_gaps {
            let (left, right) = (values[a - 1], values[b]);
            let steps = (b - a + 1) as f64;
            for (j, v) in values[a..b].iter_mut().enumerate() {
                *v = left + (right - left) * (j + 1) as f64 / steps;
            }
        }
        let truth = values[a..b].to_vec();
        match kind {
            DefectKind::EstimatedRun => {
                let mean = truth.iter().sum::<f64>() / truth.len() as f64;
                values[a..b].iter_mut().for_each(|v| *v = mean);
            }
            _ => missing[a..b].iter_mut().for_each(|m| *m = true),
        }
        log.push(DefectRecord {
            kind,
            account_id: acct.id.clone(),
            start: tl.reading_time(a),
            slots: b - a,
            truth,
        });
    }

    let mut csv = String::with_capacity(tl.slots * 32);
    for (t, v) in values.iter().enumerate() {
        if !missing[t] {
            let _ = writeln!(
                csv,
                "{},{},{}",
                acct.id,
                tl.reading_time(t).format(TIMESTAMP_FORMAT),
                v
            );
        }
    }
    (csv, log)
}

/// Produces the ingest CSV and its ground truth. Deterministic in the seed.
pub fn generate_dataset(spec: &SynthSpec) -> Result<(String, GroundTruth), SynthError> {
    spec.validate()?;
    let counts = apportion(
        spec.account_count,
        &spec.shapes.iter().map(|s| s.share).collect::<Vec<_>>(),
    );
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n(i, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    labels.shuffle(&mut rng);

    let width = spec.account_count.to_string().len().max(4);
    let mut accounts: Vec<Account> = labels
        .iter()
        .enumerate()
        .map(|(i, &shape)| Account {
            id: format!("A{:0width$}", i + 1),
            shape,
            shifted_to: None,
            degraded: false,
        })
        .collect();

    for s in &spec.shifts {
        let from = NaiveDate::from_ymd_opt(spec.start_year, s.start_month, 1)
            .expect("validated month")
            .and_hms_opt(0, 0, 0)
            .expect("midnight");
        let candidates: Vec<usize> = (0..accounts.len())
            .filter(|&i| accounts[i].shape == s.from_shape && accounts[i].shifted_to.is_none())
            .take(s.accounts)
            .collect();
        if candidates.len() < s.accounts {
            return Err(SynthError::InvalidSpec(format!(
                "shift wants {} accounts of shape {} but only {} are free",
                s.accounts,
                s.from_shape,
                candidates.len()
            )));
        }
        for i in candidates {
            accounts[i].shifted_to = Some((s.to_shape, from));
        }
    }

    let degraded = (spec.degraded_share * spec.account_count as f64).round() as usize;
    let mut order: Vec<usize> = (0..accounts.len()).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(degraded) {
        accounts[i].degraded = true;
    }

    let tl = Timeline::new(spec);
    let parts: Vec<(String, Vec<DefectRecord>)> = accounts
        .par_iter()
        .enumerate()
        .map(|(i, a)| generate_account(spec, &tl, a, i as u64 + 1))
        .collect();

    let mut csv = String::with_capacity(parts.iter().map(|p| p.0.len()).sum::<usize>() + 32);
    csv.push_str("account_id,timestamp,energy_kwh\n");
    let mut truth = GroundTruth::default();
    for (a, (rows, log)) in accounts.iter().zip(parts) {
        csv.push_str(&rows);
        truth.assignments.insert(a.id.clone(), a.shape);
        if let Some((to, _)) = a.shifted_to {
            truth.shifted.insert(a.id.clone(), to);
        }
        if a.degraded {
            truth.degraded.insert(a.id.clone());
        }
        truth.defects.extend(log);
    }
    Ok((csv, truth))
}

/// Writes the CSV to `csv_path` and `ground_truth.json` beside it.
pub fn write_dataset(spec: &SynthSpec, csv_path: &Path) -> Result<GroundTruth, SynthError> {
    let (csv, truth) = generate_dataset(spec)?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    let dir = csv_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io(dir))?;
    fs::write(csv_path, csv).map_err(io(csv_path))?;
    let gt = dir.join("ground_truth.json");
    let mut json = serde_json::to_string_pretty(&truth).expect("serializable");
    json.push('\n');
    fs::write(&gt, json).map_err(io(&gt))?;
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cleanse::{detect_estimated_runs, detect_gaps, CleanseConfig};
    use crate::ingest::{assemble_series, parse_csv};

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            account_count: 12,
            shapes: default_shapes(3),
            months: Some((3, 4)),
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn apportion_by_largest_remainder() {
        assert_eq!(apportion(821, &[1.0 / 9.0; 9]).iter().sum::<usize>(), 821);
        assert_eq!(apportion(10, &[0.35, 0.35, 0.3]), vec![4, 3, 3]);
        assert_eq!(apportion(200, &[0.24, 0.76]), vec![48, 152]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, ta) = generate_dataset(&small(7)).unwrap();
        let (b, tb) = generate_dataset(&small(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_dataset(&small(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_are_distinct_after_normalization() {
        let shapes = default_shapes(12);
        for (i, a) in shapes.iter().enumerate() {
            let pa = a.base.iter().copied().fold(0.0, f64::max);
            for b in &shapes[i + 1..] {
                let pb = b.base.iter().copied().fold(0.0, f64::max);
                let d: f64 = a
                    .base
                    .iter()
                    .zip(&b.base)
                    .map(|(x, y)| (x / pa - y / pb).powi(2))
                    .sum();
                assert!(d > 0.1, "shapes too close: {d}");
            }
            assert!(a.base.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn full_short_gap_rate_hits_every_month() {
        let mut spec = small(3);
        spec.rates.short_gap = 1.0;
        let (_, truth) = generate_dataset(&spec).unwrap();
        for id in truth.assignments.keys() {
            let months: BTreeSet<u32> = truth
                .defects_of(id)
                .filter(|d| d.kind == DefectKind::ShortGap)
                .map(|d| d.start.month())
                .collect();
            assert_eq!(months, BTreeSet::from([3, 4]), "{id}");
        }
    }

    #[test]
    fn defect_log_matches_detection() {
        let mut spec = small(11);
        spec.rates = DefectRates {
            short_gap: 0.8,
            long_gap: 0.5,
            estimated_run: 0.8,
        };
        spec.noise_sigma = 0.1;
        let (csv, truth) = generate_dataset(&spec).unwrap();
        let series = assemble_series(&parse_csv(csv.as_bytes()).unwrap())
            .unwrap()
            .series;
        let config = CleanseConfig::default();
        for s in &series {
            let mut planted: Vec<(usize, usize, bool)> = truth
                .defects_of(&s.account_id)
                .map(|d| (s.slot_of(d.start).unwrap(), d.slots, d.kind.is_gap()))
                .collect();
            planted.sort();
            let mut found: Vec<(usize, usize, bool)> = detect_gaps(s)
                .iter()
                .map(|g| (g.start_slot, g.length_slots, true))
                .chain(
                    detect_estimated_runs(s, &config)
                        .iter()
                        .map(|r| (r.start_slot, r.length_slots, false)),
                )
                .collect();
            found.sort();
            assert_eq!(found, planted, "{}", s.account_id);
        }
        assert!(!truth.defects.is_empty());
    }

    #[test]
    fn quarter_hour_sums_to_hourly_shape() {
        let mut spec = small(5);
        spec.noise_sigma = 0.0;
        spec.interval = Interval::QuarterHour;
        let (csv, truth) = generate_dataset(&spec).unwrap();
        let readings = parse_csv(csv.as_bytes()).unwrap();
        let id = truth.assignments.keys().next().unwrap();
        let shape = &spec.shapes[truth.assignments[id]].base;
        let first: Vec<f64> = readings
            .iter()
            .filter(|r| &r.account_id == id)
            .take(8)
            .map(|r| r.energy_kwh)
            .collect();
        // readings are interval-ending; the first four cover 00:00-01:00
        assert_eq!(first[0], first[3]);
        let ratio = (first[0] * 4.0) / shape[0];
        assert!(((first[4] * 4.0) / shape[1] - ratio).abs() < 1e-12);
        assert!((1.0..=10.0).contains(&ratio));
    }

    #[test]
    fn shifts_and_degradation_are_recorded() {
        let spec = SynthSpec {
            account_count: 40,
            shapes: vec![
                ClusterShape {
                    share: 0.5,
                    ..default_shapes(2)[0].clone()
                },
                ClusterShape {
                    share: 0.5,
                    ..default_shapes(2)[1].clone()
                },
            ],
            months: Some((6, 10)),
            degraded_share: 0.1,
            shifts: vec![ShapeShift {
                from_shape: 0,
                to_shape: 1,
                accounts: 5,
                start_month: 9,
            }],
            ..SynthSpec::default()
        };
        let (_, truth) = generate_dataset(&spec).unwrap();
        assert_eq!(truth.shifted.len(), 5);
        assert!(truth.shifted.keys().all(|id| truth.assignments[id] == 0));
        assert_eq!(truth.degraded.len(), 4);
        for id in &truth.degraded {
            assert_eq!(
                truth
                    .defects_of(id)
                    .filter(|d| d.kind == DefectKind::Degradation)
                    .count(),
                5
            );
        }
        let mut greedy = spec.clone();
        greedy.shifts[0].accounts = 21;
        assert!(matches!(
            generate_dataset(&greedy),
            Err(SynthError::InvalidSpec(_))
        ));
    }

    #[test]
    fn linear_short_gaps_lie_on_the_line() {
        let mut spec = small(2);
        spec.rates.short_gap = 1.0;
        spec.short_gap_hours = 4.0;
        spec.linear_short_gaps = true;
        let (_, truth) = generate_dataset(&spec).unwrap();
        for d in truth
            .defects
            .iter()
            .filter(|d| d.kind == DefectKind::ShortGap)
        {
            let step = d.truth[1] - d.truth[0];
            for w in d.truth.windows(2) {
                assert!((w[1] - w[0] - step).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let cases: Vec<Box<dyn Fn(&mut SynthSpec)>> = vec![
            Box::new(|s| s.account_count = 0),
            Box::new(|s| s.shapes.clear()),
            Box::new(|s| s.shapes[0].share = 0.9),
            Box::new(|s| s.shapes[0].base.pop().map(|_| ()).unwrap_or(())),
            Box::new(|s| s.shapes[1].amplitude = (2.0, 1.0)),
            Box::new(|s| s.rates.long_gap = 1.5),
            Box::new(|s| s.noise_sigma = -0.1),
            Box::new(|s| s.years = 0),
            Box::new(|s| s.years = 2),
            Box::new(|s| s.months = Some((5, 2))),
            Box::new(|s| {
                s.shifts.push(ShapeShift {
                    from_shape: 0,
                    to_shape: 9,
                    accounts: 1,
                    start_month: 3,
                })
            }),
        ];
        for (i, mutate) in cases.iter().enumerate() {
            let mut spec = small(1);
            mutate(&mut spec);
            assert!(
                matches!(generate_dataset(&spec), Err(SynthError::InvalidSpec(_))),
                "case {i}"
            );
        }
    }

    #[test]
    fn writes_csv_and_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data/readings.csv");
        let truth = write_dataset(&small(4), &path).unwrap();
        let back: GroundTruth = serde_json::from_str(
            &fs::read_to_string(dir.path().join("data/ground_truth.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(back, truth);
        assert!(fs::read_to_string(&path)
            .unwrap()
            .starts_with("account_id,timestamp,energy_kwh\n"));
    }
}
