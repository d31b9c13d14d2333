//! k-means partitioning of daily profiles.
//!
//! Lloyd iterations with k-means++ (or random-partition) seeding, followed by
//! single-point moves that Lloyd alone can miss, several restarts, and
//! deterministic output for a given seed. Profiles are processed
//! in account-id order so that all random choices are tied to accounts rather
//! than to input positions.

mod ari;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::metrics::{squared_euclidean, Measure};
use crate::profile::ProfileSet;

pub use ari::adjusted_rand_index;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("profile set is empty")]
    EmptyProfileSet,
    #[error("k = {k} exceeds the number of profiles ({n})")]
    KGreaterThanN { k: usize, n: usize },
    #[error("invalid k-means config: {0}")]
    InvalidConfig(String),
    #[error("profile {account} has {found} slots, expected {expected}")]
    LengthMismatch {
        account: String,
        expected: usize,
        found: usize,
    },
    #[error("account {0} has no cluster assignment")]
    UnassignedAccount(String),
    #[error("clustering file: {0}")]
    Format(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// D²-weighted seeding.
    KMeansPlusPlus,
    /// Every point gets a random cluster (each cluster at least one); centroids
    /// start at the resulting means.
    RandomPartition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the relative objective decrease falls below this.
    pub tol: f64,
    pub init: Init,
    pub restarts: usize,
    /// Dissimilarity used to pick the nearest centroid. Euclidean, squared
    /// Euclidean and the rms variant all yield the same assignment.
    pub measure: Measure,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        let bad = |m: &str| Err(ClusterError::InvalidConfig(m.into()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1");
        }
        if !(self.tol >= 0.0) {
            return bad("tol must be non-negative");
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        Ok(())
    }
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 1,
            seed: 0,
            max_iter: 300,
            tol: 1e-6,
            init: Init::KMeansPlusPlus,
            restarts: 10,
            measure: Measure::Euclidean,
        }
    }
}

/// Result of a k-means run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub seed: u64,
    pub measure: Measure,
    #[serde(default)]
    pub filter_label: String,
    /// Within-cluster sum of squared Euclidean distances to the centroids.
    pub objective: f64,
    pub iterations: usize,
    /// Index of the restart that won.
    pub restart: usize,
    /// Objective after each Lloyd iteration of the winning restart.
    pub trace: Vec<f64>,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: BTreeMap<String, usize>,
}

impl Clustering {
    pub fn cluster_of(&self, account_id: &str) -> Option<usize> {
        self.assignments.get(account_id).copied()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in self.assignments.values() {
            sizes[c] += 1;
        }
        sizes
    }

    /// Member account ids of `cluster`, sorted.
    pub fn members(&self, cluster: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &c)| c == cluster)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// The partition as a set of account groups, independent of label values.
    pub fn groups(&self) -> BTreeSet<BTreeSet<String>> {
        let mut groups: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
        for (id, &c) in &self.assignments {
            groups.entry(c).or_default().insert(id.clone());
        }
        groups.into_values().collect()
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<(), ClusterError> {
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self, ClusterError> {
        Ok(serde_json::from_reader(input)?)
    }
}

/// Σ d_dos(profile, assigned centroid) over every profile in the set.
pub fn objective(profiles: &ProfileSet, clustering: &Clustering) -> Result<f64, ClusterError> {
    profiles
        .profiles
        .iter()
        .map(|p| {
            let c = clustering
                .cluster_of(&p.account_id)
                .ok_or_else(|| ClusterError::UnassignedAccount(p.account_id.clone()))?;
            Ok(squared_euclidean(&p.values, &clustering.centroids[c]))
        })
        .sum()
}

/// One Lloyd run in sorted-account space.
#[derive(Debug, Clone)]
struct Run {
    assign: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    objective: f64,
    trace: Vec<f64>,
}

struct Data<'a> {
    ids: Vec<&'a str>,
    points: Vec<&'a [f64]>,
    n: usize,
}

impl<'a> Data<'a> {
    fn new(profiles: &'a ProfileSet) -> Result<Self, ClusterError> {
        let mut order: Vec<usize> = (0..profiles.len()).collect();
        order.sort_by(|&a, &b| {
            profiles.profiles[a]
                .account_id
                .cmp(&profiles.profiles[b].account_id)
        });
        let n = profiles.n();
        let mut ids = Vec::with_capacity(order.len());
        let mut points = Vec::with_capacity(order.len());
        for i in order {
            let p = &profiles.profiles[i];
            if p.values.len() != n {
                return Err(ClusterError::LengthMismatch {
                    account: p.account_id.clone(),
                    expected: n,
                    found: p.values.len(),
                });
            }
            ids.push(p.account_id.as_str());
            points.push(p.values.as_slice());
        }
        Ok(Self { ids, points, n })
    }

    fn len(&self) -> usize {
        self.points.len()
    }
}

fn peak_scaled(v: &[f64]) -> Vec<f64> {
    let peak = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak > 0.0 {
        v.iter().map(|x| x / peak).collect()
    } else {
        v.to_vec()
    }
}

/// Nearest centroid per point; ties go to the lower index.
fn assign(data: &Data, centroids: &[Vec<f64>], measure: Measure) -> Vec<usize> {
    let nearest = |p: &[f64], cs: &[Vec<f64>]| {
        let mut best = (0, f64::INFINITY);
        for (j, c) in cs.iter().enumerate() {
            let d = squared_euclidean(p, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    };
    match measure {
        Measure::NormalizedMax => {
            let scaled: Vec<Vec<f64>> = centroids.iter().map(|c| peak_scaled(c)).collect();
            data.points
                .par_iter()
                .map(|p| nearest(&peak_scaled(p), &scaled))
                .collect()
        }
        _ => data
            .points
            .par_iter()
            .map(|p| nearest(p, centroids))
            .collect(),
    }
}

fn means(data: &Data, assign: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; data.n]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in data.points.iter().zip(assign) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (s, &count) in sums.iter_mut().zip(&counts) {
        if count > 0 {
            s.iter_mut().for_each(|x| *x /= count as f64);
        }
    }
    sums
}

fn wcss(data: &Data, assign: &[usize], centroids: &[Vec<f64>]) -> f64 {
    data.points
        .iter()
        .zip(assign)
        .map(|(p, &c)| squared_euclidean(p, &centroids[c]))
        .sum()
}

/// Gives every empty cluster the point farthest from its own centroid, taken
/// from a cluster that can spare one.
fn repair_empty(data: &Data, assign: &mut [usize], centroids: &mut [Vec<f64>]) -> usize {
    let k = centroids.len();
    let mut repaired = 0;
    loop {
        let mut counts = vec![0usize; k];
        for &c in assign.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return repaired;
        };
        let donor = (0..data.len())
            .filter(|&i| counts[assign[i]] >= 2)
            .map(|i| (i, squared_euclidean(data.points[i], &centroids[assign[i]])))
            .fold(None::<(usize, f64)>, |best, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            })
            .map(|(i, _)| i)
            .expect("k <= N guarantees a cluster with two members");
        assign[donor] = empty;
        centroids[empty] = data.points[donor].to_vec();
        repaired += 1;
    }
}

fn lloyd(data: &Data, mut centroids: Vec<Vec<f64>>, config: &KMeansConfig) -> Run {
    let k = centroids.len();
    let mut trace = Vec::new();
    let mut prev: Option<(Vec<usize>, f64)> = None;
    for _ in 0..config.max_iter {
        let mut assignment = assign(data, &centroids, config.measure);
        let repaired = repair_empty(data, &mut assignment, &mut centroids);
        if repaired > 0 {
            debug!(repaired, "reseeded empty clusters");
        }
        centroids = means(data, &assignment, k);
        let obj = wcss(data, &assignment, &centroids);
        trace.push(obj);
        let stop = match &prev {
            Some((prev_assign, prev_obj)) => {
                *prev_assign == assignment || (prev_obj - obj) <= config.tol * prev_obj.abs()
            }
            None => obj == 0.0,
        };
        prev = Some((assignment, obj));
        if stop {
            break;
        }
    }
    let (mut assign, mut objective) = prev.expect("max_iter >= 1");
    if config.measure != Measure::NormalizedMax {
        if let Some(obj) = refine(
            data,
            &mut assign,
            &mut centroids,
            &mut trace,
            config.max_iter,
        ) {
            objective = obj;
        }
    }
    Run {
        assign,
        centroids,
        objective,
        trace,
    }
}

/// Moves single points while doing so lowers the objective with both means
/// updated. Such a state is also stable under nearest-centroid assignment.
/// Each pass that moved something appends its objective to the trace.
fn refine(
    data: &Data,
    assign: &mut [usize],
    centroids: &mut Vec<Vec<f64>>,
    trace: &mut Vec<f64>,
    max_passes: usize,
) -> Option<f64> {
    let k = centroids.len();
    let mut last = None;
    for _ in 0..max_passes {
        let mut counts = vec![0usize; k];
        for &c in assign.iter() {
            counts[c] += 1;
        }
        let mut moved = false;
        for (i, p) in data.points.iter().enumerate() {
            let a = assign[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let leave = na / (na - 1.0) * squared_euclidean(p, &centroids[a]);
            let mut best: Option<(usize, f64)> = None;
            for (b, c) in centroids.iter().enumerate() {
                if b == a {
                    continue;
                }
                let nb = counts[b] as f64;
                let join = nb / (nb + 1.0) * squared_euclidean(p, c);
                if join < leave - 1e-12 * leave && best.is_none_or(|(_, j)| join < j) {
                    best = Some((b, join));
                }
            }
            if let Some((b, _)) = best {
                let nb = counts[b] as f64;
                for (j, x) in p.iter().enumerate() {
                    centroids[a][j] = (centroids[a][j] * na - x) / (na - 1.0);
                    centroids[b][j] = (centroids[b][j] * nb + x) / (nb + 1.0);
                }
                counts[a] -= 1;
                counts[b] += 1;
                assign[i] = b;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        *centroids = means(data, assign, k);
        let obj = wcss(data, assign, centroids);
        trace.push(obj);
        last = Some(obj);
    }
    last
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

fn kmeans_plus_plus(data: &Data, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![data.points[rng.random_range(0..data.len())].to_vec()];
    let mut d2: Vec<f64> = data
        .points
        .iter()
        .map(|p| squared_euclidean(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            rng.random_range(0..data.len())
        };
        let c = data.points[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(&data.points) {
            *d = d.min(squared_euclidean(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn random_partition(data: &Data, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut assignment = vec![0; data.len()];
    for (rank, &i) in order.iter().enumerate() {
        assignment[i] = if rank < k {
            rank
        } else {
            rng.random_range(0..k)
        };
    }
    means(data, &assignment, k)
}

fn run_restarts(data: &Data, config: &KMeansConfig) -> (usize, Run) {
    (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = restart_rng(config.seed, r);
            let init = match config.init {
                Init::KMeansPlusPlus => kmeans_plus_plus(data, config.k, &mut rng),
                Init::RandomPartition => random_partition(data, config.k, &mut rng),
            };
            (r, lloyd(data, init, config))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective).then(a.0.cmp(&b.0)))
        .expect("restarts >= 1")
}

fn check_inputs(profiles: &ProfileSet, config: &KMeansConfig) -> Result<(), ClusterError> {
    config.validate()?;
    if profiles.is_empty() {
        return Err(ClusterError::EmptyProfileSet);
    }
    if config.k > profiles.len() {
        return Err(ClusterError::KGreaterThanN {
            k: config.k,
            n: profiles.len(),
        });
    }
    if profiles.profiles.iter().any(|p| !p.normalized) {
        warn!("clustering profiles that are not peak-normalized");
    }
    Ok(())
}

fn into_clustering(
    data: &Data,
    config: &KMeansConfig,
    restart: usize,
    run: Run,
    label: &str,
) -> Clustering {
    Clustering {
        k: config.k,
        seed: config.seed,
        measure: config.measure,
        filter_label: label.to_string(),
        objective: run.objective,
        iterations: run.trace.len(),
        restart,
        trace: run.trace,
        centroids: run.centroids,
        assignments: data
            .ids
            .iter()
            .zip(&run.assign)
            .map(|(id, &c)| (id.to_string(), c))
            .collect(),
    }
}

/// Best-of-restarts k-means.
pub fn kmeans(profiles: &ProfileSet, config: &KMeansConfig) -> Result<Clustering, ClusterError> {
    check_inputs(profiles, config)?;
    let data = Data::new(profiles)?;
    let (restart, run) = run_restarts(&data, config);
    Ok(into_clustering(
        &data,
        config,
        restart,
        run,
        &profiles.label,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub objective: f64,
    pub iterations: usize,
}

/// Best objective for each k in `ks`.
///
/// Besides the configured restarts, every k after the first also gets a run
/// seeded from the previous k's best centroids plus the point farthest from
/// them, so the reported objectives never increase with k.
pub fn sweep_k(
    profiles: &ProfileSet,
    ks: RangeInclusive<usize>,
    config: &KMeansConfig,
) -> Result<Vec<SweepRow>, ClusterError> {
    let mut rows = Vec::new();
    let mut previous: Option<Run> = None;
    for k in ks {
        let cfg = KMeansConfig {
            k,
            ..config.clone()
        };
        check_inputs(profiles, &cfg)?;
        let data = Data::new(profiles)?;
        let (_, mut best) = run_restarts(&data, &cfg);
        if let Some(prev) = previous.as_ref().filter(|p| p.centroids.len() + 1 == k) {
            let far = data
                .points
                .iter()
                .zip(&prev.assign)
                .map(|(p, &c)| squared_euclidean(p, &prev.centroids[c]))
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, d)| if d > b.1 { (i, d) } else { b },
                )
                .0;
            let mut init = prev.centroids.clone();
            init.push(data.points[far].to_vec());
            let warm = lloyd(&data, init, &cfg);
            if warm.objective < best.objective {
                best = warm;
            }
        }
        rows.push(SweepRow {
            k,
            objective: best.objective,
            iterations: best.trace.len(),
        });
        previous = Some(best);
    }
    Ok(rows)
}

/// The k where the objective stops falling steeply: the largest ratio of the
/// decrease into k to the decrease out of it. Unlike a raw second difference
/// this does not favor the first steps of the curve.
pub fn elbow(rows: &[SweepRow]) -> Option<usize> {
    rows.windows(3)
        .map(|w| {
            let into = w[0].objective - w[1].objective;
            let out = w[1].objective - w[2].objective;
            let floor = 1e-12 * w[0].objective.abs().max(f64::MIN_POSITIVE);
            (w[1].k, into.max(0.0) / out.max(floor))
        })
        .fold(None, |best: Option<(usize, f64)>, cand| match best {
            Some(b) if b.1 >= cand.1 => Some(b),
            _ => Some(cand),
        })
        .map(|(k, _)| k)
}
