//! Peer-comparison output: cluster mean profiles, per-slot deviations,
//! open/close hour labels, period drift, plots and summaries.

mod drift;
mod plot;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::Clustering;
use crate::profile::ProfileSet;

pub use drift::{compare_periods, min_cost_assignment, ClusterMatch, DriftReport, Flow};
pub use plot::{emit_cluster_plot, render_cluster_svg};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("account {0} has no cluster assignment")]
    UnassignedAccount(String),
    #[error("profile has no positive value")]
    AllZeroProfile,
    #[error("open/close level must lie strictly between 0 and 1, got {0}")]
    InvalidLevel(f64),
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("the two clusterings share no account")]
    NoCommonAccounts,
    #[error("centroid lengths differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("nothing to summarize")]
    EmptyReport,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub cluster: usize,
    pub members: Vec<String>,
    pub mean_profile: Vec<f64>,
    /// Share of all profiles in the set, in (0, 1].
    pub member_share: f64,
    pub label: String,
    pub open_hours: Option<OpenHours>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Above,
    Below,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub account_id: String,
    pub cluster: usize,
    pub slot: usize,
    pub direction: Direction,
    /// Distance from the slot mean in population standard deviations.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenHours {
    pub start_slot: usize,
    pub duration_slots: usize,
    pub label: String,
}

fn member_rows<'a>(
    profiles: &'a ProfileSet,
    clustering: &Clustering,
) -> Result<BTreeMap<usize, Vec<(&'a str, &'a [f64])>>, ReportError> {
    let mut rows: BTreeMap<usize, Vec<(&str, &[f64])>> = BTreeMap::new();
    for p in &profiles.profiles {
        let c = clustering
            .cluster_of(&p.account_id)
            .ok_or_else(|| ReportError::UnassignedAccount(p.account_id.clone()))?;
        rows.entry(c)
            .or_default()
            .push((p.account_id.as_str(), p.values.as_slice()));
    }
    Ok(rows)
}

fn slot_mean(rows: &[(&str, &[f64])], n: usize) -> Vec<f64> {
    let mut mean = vec![0.0; n];
    for (_, v) in rows {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    mean
}

/// Mean profile and share of every non-empty cluster. Labels are left empty.
pub fn cluster_means(
    profiles: &ProfileSet,
    clustering: &Clustering,
) -> Result<Vec<ClusterReport>, ReportError> {
    let total = profiles.len() as f64;
    let n = profiles.n();
    Ok(member_rows(profiles, clustering)?
        .into_iter()
        .map(|(cluster, rows)| ClusterReport {
            cluster,
            mean_profile: slot_mean(&rows, n),
            member_share: rows.len() as f64 / total,
            members: rows.iter().map(|(id, _)| id.to_string()).collect(),
            label: String::new(),
            open_hours: None,
        })
        .collect())
}

/// Flags member values further than `z_threshold` population standard
/// deviations from their cluster's slot mean. Slots without spread never flag.
pub fn deviation_scan(
    profiles: &ProfileSet,
    clustering: &Clustering,
    z_threshold: f64,
) -> Result<Vec<Deviation>, ReportError> {
    let n = profiles.n();
    let mut out = Vec::new();
    for (cluster, rows) in member_rows(profiles, clustering)? {
        if rows.len() < 2 {
            continue;
        }
        let mean = slot_mean(&rows, n);
        for slot in 0..n {
            let var = rows
                .iter()
                .map(|(_, v)| (v[slot] - mean[slot]).powi(2))
                .sum::<f64>()
                / rows.len() as f64;
            let sd = var.sqrt();
            if sd <= 1e-12 * mean[slot].abs().max(1.0) {
                continue;
            }
            for (id, v) in &rows {
                let z = (v[slot] - mean[slot]) / sd;
                if z.abs() > z_threshold {
                    out.push(Deviation {
                        account_id: id.to_string(),
                        cluster,
                        slot,
                        direction: if z < 0.0 {
                            Direction::Below
                        } else {
                            Direction::Above
                        },
                        magnitude: z.abs(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Longest circular run of slots at or above `level` times the peak.
///
/// Ties go to the earliest start. The label is in whole hours whatever the
/// slot width.
pub fn infer_open_close(mean_profile: &[f64], level: f64) -> Result<OpenHours, ReportError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(ReportError::InvalidLevel(level));
    }
    let peak = mean_profile
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Err(ReportError::AllZeroProfile);
    }
    let n = mean_profile.len();
    let threshold = level * peak;
    let high: Vec<bool> = mean_profile.iter().map(|&v| v >= threshold).collect();
    let (start, len) = match high.iter().position(|&h| !h) {
        None => (0, n),
        Some(low) => {
            // scan once around the circle starting just after a low slot
            let mut best = (0usize, 0usize);
            let mut run_start = None;
            for step in 1..=n {
                let i = (low + step) % n;
                match (high[i], run_start) {
                    (true, None) => run_start = Some((i, step)),
                    (false, Some((s, first))) => {
                        let len = step - first;
                        if len > best.1 || (len == best.1 && s < best.0) {
                            best = (s, len);
                        }
                        run_start = None;
                    }
                    _ => {}
                }
            }
            best
        }
    };
    let per_hour = (n / 24).max(1);
    Ok(OpenHours {
        start_slot: start,
        duration_slots: len,
        label: format!(
            "open at {} for {} hours",
            start / per_hour,
            (len + per_hour / 2) / per_hour
        ),
    })
}

/// Fills `label` and `open_hours` of each report.
pub fn label_clusters(reports: &mut [ClusterReport], level: f64) -> Result<(), ReportError> {
    for r in reports {
        match infer_open_close(&r.mean_profile, level) {
            Ok(hours) => {
                r.label = hours.label.clone();
                r.open_hours = Some(hours);
            }
            Err(ReportError::AllZeroProfile) => r.label = "no load".into(),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub size: usize,
    pub share: f64,
    pub share_text: String,
    pub label: String,
    pub deviations_above: usize,
    pub deviations_below: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub filter_label: String,
    pub total_accounts: usize,
    pub clusters: Vec<ClusterSummary>,
    pub deviations: usize,
    pub flagged_accounts: usize,
    pub drift: Option<DriftReport>,
}

/// Rounded whole-percent rendering, e.g. 48 of 821 gives "6%".
pub fn share_text(share: f64) -> String {
    format!("{:.0}%", share * 100.0)
}

pub fn build_summary(
    filter_label: &str,
    reports: &[ClusterReport],
    deviations: &[Deviation],
    drift: Option<DriftReport>,
) -> Result<Summary, ReportError> {
    if reports.is_empty() {
        return Err(ReportError::EmptyReport);
    }
    let count = |c: usize, d: Direction| {
        deviations
            .iter()
            .filter(|x| x.cluster == c && x.direction == d)
            .count()
    };
    let flagged: BTreeSet<&str> = deviations.iter().map(|d| d.account_id.as_str()).collect();
    Ok(Summary {
        filter_label: filter_label.to_string(),
        total_accounts: reports.iter().map(|r| r.members.len()).sum(),
        clusters: reports
            .iter()
            .map(|r| ClusterSummary {
                cluster: r.cluster,
                size: r.members.len(),
                share: r.member_share,
                share_text: share_text(r.member_share),
                label: r.label.clone(),
                deviations_above: count(r.cluster, Direction::Above),
                deviations_below: count(r.cluster, Direction::Below),
            })
            .collect(),
        deviations: deviations.len(),
        flagged_accounts: flagged.len(),
        drift,
    })
}

pub fn render_digest(summary: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} accounts in {} clusters ({})",
        summary.total_accounts,
        summary.clusters.len(),
        if summary.filter_label.is_empty() {
            "unlabeled"
        } else {
            &summary.filter_label
        }
    );
    for c in &summary.clusters {
        let _ = writeln!(
            out,
            "  cluster {:>2}: {:>5} accounts ({:>4})  {}  deviations +{} -{}",
            c.cluster, c.size, c.share_text, c.label, c.deviations_above, c.deviations_below
        );
    }
    if summary.deviations == 0 {
        let _ = writeln!(out, "no deviations; 0 flagged accounts");
    } else {
        let _ = writeln!(
            out,
            "{} deviations across {} flagged accounts",
            summary.deviations, summary.flagged_accounts
        );
    }
    if let Some(d) = &summary.drift {
        let _ = writeln!(
            out,
            "drift: {} of {} common accounts relocated",
            d.relocated, d.common
        );
    }
    out
}

/// Writes the summary JSON to `path` and the text digest next to it with a
/// `.txt` extension. Returns the digest.
pub fn emit_summary(summary: &Summary, path: &Path) -> Result<String, ReportError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut json = serde_json::to_string_pretty(summary).expect("serializable");
    json.push('\n');
    fs::write(path, json).map_err(io_err(path))?;
    let digest = render_digest(summary);
    let txt = path.with_extension("txt");
    fs::write(&txt, &digest).map_err(io_err(&txt))?;
    Ok(digest)
}
