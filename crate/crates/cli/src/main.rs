mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use loadshape::metrics::Measure;
use tracing_subscriber::EnvFilter;

/// Load shape mining for interval meter data.
#[derive(Debug, Parser)]
#[command(name = "lsm", version)]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, env = "LSM_THREADS")]
    threads: Option<usize>,
    /// JSON file with defaults for cleanse, kmeans and report settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a readings CSV and write per-account series into a store.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
    /// Fill gaps, resolve estimated runs and drop low-quality accounts.
    Cleanse(CleanseArgs),
    /// Average calendar-selected days into one daily profile per account.
    Profile(ProfileArgs),
    /// Partition profiles with k-means.
    Cluster(ClusterArgs),
    /// Cluster means, open-hours labels, deviations, plots and a summary.
    Report(ReportArgs),
    /// Match the clusters of two periods and count relocated accounts.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Best objective for a range of k, with the elbow.
    Sweep(SweepArgs),
    /// Generate a synthetic readings CSV with planted shapes.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct CleanseArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    short_gap_max_hours: Option<f64>,
    #[arg(long)]
    est_run_threshold: Option<usize>,
    #[arg(long)]
    est_long_max_hours: Option<f64>,
    #[arg(long)]
    drop_quality_frac: Option<f64>,
    /// Treat runs of zeros like any other constant run.
    #[arg(long)]
    no_zero_exempt: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Days {
    Weekdays,
    Weekends,
    All,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    store: PathBuf,
    /// Months such as `6`, `9,10` or `6-8`.
    #[arg(long, value_parser = parse_list::<u32>)]
    months: List<u32>,
    #[arg(long, value_enum)]
    days: Days,
    /// Restrict to these years, e.g. `2009` or `2008-2010`.
    #[arg(long, value_parser = parse_list::<i32>)]
    years: Option<List<i32>>,
    #[arg(long)]
    no_normalize: bool,
    /// Keep 15-minute resolution (96 slots) instead of hourly sums.
    #[arg(long = "keep-15min")]
    keep_15min: bool,
    /// Label stored with the profiles (default derived from the filter).
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    #[value(name = "kmeans++")]
    KMeansPlusPlus,
    Random,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    profiles: PathBuf,
    #[arg(short, long, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    #[arg(long, value_parser = parse_measure)]
    measure: Option<Measure>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    restarts: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    max_iter: Option<u64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    /// Also write the pairwise distance matrix under the chosen measure.
    #[arg(long)]
    distances: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    clusters: PathBuf,
    #[arg(long)]
    profiles: PathBuf,
    /// Directory for one SVG per cluster.
    #[arg(long)]
    plots: Option<PathBuf>,
    #[arg(long)]
    open_close_level: Option<f64>,
    #[arg(long)]
    z_threshold: Option<f64>,
    /// Clusters of an earlier period to include a drift section.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Summary JSON path; the text digest goes next to it. Without it the
    /// digest is printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    profiles: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k_min: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k_max: u64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    restarts: Option<u64>,
    #[arg(long, value_parser = parse_measure)]
    measure: Option<Measure>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    accounts: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    clusters: u64,
    /// Sigma of the per-slot multiplicative log-normal noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Short-gap, long-gap and estimated-run probabilities per account-month.
    #[arg(long, value_parser = parse_rates)]
    defect_rates: Option<(f64, f64, f64)>,
    #[arg(long, default_value_t = 0.0)]
    degraded_share: f64,
    #[arg(long, default_value_t = 2009)]
    start_year: i32,
    #[arg(long, default_value_t = 1)]
    years: u32,
    /// Month range within a single year, e.g. `6` or `6-10`.
    #[arg(long, value_parser = parse_list::<u32>)]
    months: Option<List<u32>>,
    /// Reading interval in minutes (15 or 60).
    #[arg(long, default_value_t = 60)]
    interval: u32,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_measure(s: &str) -> Result<Measure, String> {
    s.parse()
}

/// Comma-separated values and inclusive `a-b` ranges.
fn parse_ranges(s: &str) -> Result<Vec<i64>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let parse = |x: &str| {
            x.trim()
                .parse::<i64>()
                .map_err(|_| format!("`{x}` is not a number"))
        };
        match part.split_once('-').filter(|(a, _)| !a.is_empty()) {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b || b - a > 10_000 {
                    return Err(format!("bad range `{part}`"));
                }
                out.extend(a..=b);
            }
            None => out.push(parse(part)?),
        }
    }
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct List<T>(pub Vec<T>);

fn parse_list<T: TryFrom<i64>>(s: &str) -> Result<List<T>, String> {
    parse_ranges(s)?
        .into_iter()
        .map(|v| T::try_from(v).map_err(|_| format!("{v} is out of range")))
        .collect::<Result<_, _>>()
        .map(List)
}

fn parse_rates(s: &str) -> Result<(f64, f64, f64), String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{x}` is not a number"))
        })
        .collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err("expected three comma-separated rates: short,long,estimated".into()),
    }
}

/// Marks an error caused by the invocation rather than the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();

    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
