use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use tracing::{info, warn};

use loadshape::cleanse::cleanse_pipeline;
use loadshape::cluster::{elbow, kmeans, sweep_k, Clustering, Init};
use loadshape::ingest::{assemble_series, parse_csv, MeterStore};
use loadshape::metrics::pairwise_matrix;
use loadshape::profile::{build_profiles, CalendarFilter, DayKind, ProfileOptions, ProfileSet};
use loadshape::report::{
    build_summary, cluster_means, compare_periods, deviation_scan, emit_cluster_plot, emit_summary,
    label_clusters, render_digest, DriftReport,
};
use loadshape::synth::{default_shapes, write_dataset, DefectRates, SynthSpec};
use loadshape::Interval;

use crate::config::{
    cleanse_config, kmeans_config, report_config, CleanseFlags, FileConfig, KMeansFlags,
};
use crate::{
    CleanseArgs, Cli, ClusterArgs, Command, Days, InitArg, ProfileArgs, ReportArgs, SweepArgs,
    SynthArgs, UsageError,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn log_config<T: Serialize>(what: &str, value: &T) {
    info!(
        "effective {what} configuration: {}",
        serde_json::to_string(value).expect("serializable")
    );
}

fn read_profiles(path: &Path) -> Result<ProfileSet> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    ProfileSet::read_csv(BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))
}

fn read_clusters(path: &Path) -> Result<Clustering> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Clustering::read_json(BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    let threads = cli.threads.or(file.threads);
    if threads == Some(0) {
        return Err(usage("--threads must be at least 1"));
    }
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    info!("threads: {}", rayon::current_num_threads());

    match cli.command {
        Command::Ingest { input, store } => ingest(&input, &store),
        Command::Cleanse(args) => cleanse(args, &file),
        Command::Profile(args) => profile(args),
        Command::Cluster(args) => cluster(args, &file),
        Command::Report(args) => report(args, &file),
        Command::Compare { a, b, out } => compare(&a, &b, out.as_deref()),
        Command::Sweep(args) => sweep(args, &file),
        Command::Synth(args) => synth(args),
    }
}

fn ingest(input: &Path, store: &Path) -> Result<()> {
    let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let readings =
        parse_csv(BufReader::new(file)).with_context(|| format!("parsing {}", input.display()))?;
    let assembled = assemble_series(&readings)?;
    for w in &assembled.warnings {
        warn!("{w}");
    }
    let mut store = MeterStore::open(store)?;
    store.store_batch(&assembled.series)?;
    println!(
        "ingested {} readings into {} accounts",
        readings.len(),
        assembled.series.len()
    );
    Ok(())
}

fn cleanse(args: CleanseArgs, file: &FileConfig) -> Result<()> {
    let flags = CleanseFlags {
        short_gap_max_hours: args.short_gap_max_hours,
        est_run_threshold_slots: args.est_run_threshold,
        est_long_max_hours: args.est_long_max_hours,
        drop_quality_frac: args.drop_quality_frac,
        no_zero_exempt: args.no_zero_exempt,
    };
    let config = cleanse_config(&flags, &file.cleanse);
    log_config("cleanse", &config);
    config.validate().map_err(|e| usage(e.to_string()))?;
    let mut store = MeterStore::open(&args.store)?;
    let report = cleanse_pipeline(&mut store, &config)?;
    println!("kept {} accounts, dropped {}", report.kept, report.dropped);
    for (id, status) in report.accounts.iter().filter(|(_, s)| s.dropped) {
        println!(
            "  dropped {id}: {}",
            status.drop_reason.as_deref().unwrap_or("unspecified")
        );
    }
    Ok(())
}

fn profile(args: ProfileArgs) -> Result<()> {
    let day_kind = match args.days {
        Days::Weekdays => DayKind::Weekdays,
        Days::Weekends => DayKind::Weekends,
        Days::All => DayKind::AllDays,
    };
    let mut filter =
        CalendarFilter::new(args.months.0, day_kind).map_err(|e| usage(e.to_string()))?;
    if let Some(years) = args.years {
        filter = filter.with_years(years.0);
    }
    if let Some(label) = args.label {
        filter = filter.with_label(label);
    }
    let options = ProfileOptions {
        normalize: !args.no_normalize,
        aggregate_hourly: !args.keep_15min,
    };
    info!(
        "effective profile configuration: filter {}, normalize {}, hourly {}",
        filter.label, options.normalize, options.aggregate_hourly
    );
    let store = MeterStore::open(&args.store)?;
    let set = build_profiles(&store, &filter, options)?;
    for s in &set.skipped {
        warn!("skipped {}: {}", s.account_id, s.reason);
    }
    let mut out = create(&args.out)?;
    set.write_csv(&mut out)?;
    out.flush()?;
    println!(
        "wrote {} profiles of {} slots ({} skipped) to {}",
        set.len(),
        set.n(),
        set.skipped.len(),
        args.out.display()
    );
    Ok(())
}

fn kmeans_flags(
    seed: Option<u64>,
    restarts: Option<u64>,
    max_iter: Option<u64>,
    tol: Option<f64>,
    init: Option<InitArg>,
    measure: Option<loadshape::Measure>,
) -> KMeansFlags {
    KMeansFlags {
        seed,
        restarts: restarts.map(|r| r as usize),
        max_iter: max_iter.map(|m| m as usize),
        tol,
        measure,
        init: init.map(|i| match i {
            InitArg::KMeansPlusPlus => Init::KMeansPlusPlus,
            InitArg::Random => Init::RandomPartition,
        }),
    }
}

fn cluster(args: ClusterArgs, file: &FileConfig) -> Result<()> {
    let flags = kmeans_flags(
        args.seed,
        args.restarts,
        args.max_iter,
        args.tol,
        args.init,
        args.measure,
    );
    let config = kmeans_config(args.k as usize, &flags, &file.kmeans);
    log_config("kmeans", &config);
    config.validate().map_err(|e| usage(e.to_string()))?;
    let profiles = read_profiles(&args.profiles)?;
    let clustering = kmeans(&profiles, &config)?;
    let mut out = create(&args.out)?;
    clustering.write_json(&mut out)?;
    out.flush()?;
    if let Some(path) = &args.distances {
        let matrix = pairwise_matrix(&profiles, config.measure)?;
        let mut out = create(path)?;
        matrix.write_csv(&mut out)?;
        out.flush()?;
    }
    println!(
        "k = {}: objective {:.6} after {} iterations (restart {}), sizes {:?}",
        clustering.k,
        clustering.objective,
        clustering.iterations,
        clustering.restart,
        clustering.sizes()
    );
    Ok(())
}

fn report(args: ReportArgs, file: &FileConfig) -> Result<()> {
    let config = report_config(args.open_close_level, args.z_threshold, &file.report);
    log_config("report", &config);
    if !(config.open_close_level > 0.0 && config.open_close_level < 1.0) {
        return Err(usage(
            "--open-close-level must lie strictly between 0 and 1",
        ));
    }
    if !(config.z_threshold >= 0.0) {
        return Err(usage("--z-threshold must be non-negative"));
    }
    let profiles = read_profiles(&args.profiles)?;
    let clustering = read_clusters(&args.clusters)?;
    let mut reports = cluster_means(&profiles, &clustering)?;
    label_clusters(&mut reports, config.open_close_level)?;
    let deviations = deviation_scan(&profiles, &clustering, config.z_threshold)?;
    let drift = match &args.baseline {
        Some(path) => Some(compare_periods(&read_clusters(path)?, &clustering)?),
        None => None,
    };
    let label = if clustering.filter_label.is_empty() {
        &profiles.label
    } else {
        &clustering.filter_label
    };
    let summary = build_summary(label, &reports, &deviations, drift)?;
    if let Some(dir) = &args.plots {
        for r in &reports {
            emit_cluster_plot(
                &profiles,
                &clustering,
                r.cluster,
                &dir.join(format!("cluster_{}.svg", r.cluster)),
            )?;
        }
    }
    match &args.out {
        Some(path) => {
            emit_summary(&summary, path)?;
            print!("{}", render_digest(&summary));
        }
        None => print!("{}", render_digest(&summary)),
    }
    Ok(())
}

fn print_drift(d: &DriftReport) {
    println!("{} common accounts, {} relocated", d.common, d.relocated);
    for m in &d.matches {
        let side = |c: Option<usize>| c.map_or("-".to_string(), |c| c.to_string());
        println!(
            "  {} -> {}: {} -> {} accounts, {} stayed",
            side(m.a),
            side(m.b),
            m.size_a,
            m.size_b,
            m.stayed
        );
    }
}

fn compare(a: &Path, b: &Path, out: Option<&Path>) -> Result<()> {
    let drift = compare_periods(&read_clusters(a)?, &read_clusters(b)?)?;
    if let Some(path) = out {
        write_json(path, &drift)?;
    }
    print_drift(&drift);
    Ok(())
}

fn sweep(args: SweepArgs, file: &FileConfig) -> Result<()> {
    if args.k_min > args.k_max {
        return Err(usage("--k-min must not exceed --k-max"));
    }
    let flags = kmeans_flags(args.seed, args.restarts, None, None, None, args.measure);
    let config = kmeans_config(args.k_min as usize, &flags, &file.kmeans);
    log_config("kmeans", &config);
    let profiles = read_profiles(&args.profiles)?;
    let rows = sweep_k(
        &profiles,
        args.k_min as usize..=args.k_max as usize,
        &config,
    )?;
    println!("k,objective,iterations");
    for r in &rows {
        println!("{},{},{}", r.k, r.objective, r.iterations);
    }
    match elbow(&rows) {
        Some(k) => println!("elbow at k = {k}"),
        None => println!("elbow needs at least three values of k"),
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let interval = match args.interval {
        15 => Interval::QuarterHour,
        60 => Interval::Hour,
        m => bail!(usage(format!("--interval must be 15 or 60, got {m}"))),
    };
    let months = match &args.months {
        None => None,
        Some(list) => {
            let lo = *list.0.iter().min().expect("non-empty");
            let hi = *list.0.iter().max().expect("non-empty");
            if hi - lo + 1 != list.0.len() as u32 {
                return Err(usage("--months must be one contiguous range"));
            }
            Some((lo, hi))
        }
    };
    let (short_gap, long_gap, estimated_run) = args.defect_rates.unwrap_or((0.0, 0.0, 0.0));
    let spec = SynthSpec {
        account_count: args.accounts as usize,
        shapes: default_shapes(args.clusters as usize),
        noise_sigma: args.noise,
        start_year: args.start_year,
        years: args.years,
        months,
        interval,
        rates: DefectRates {
            short_gap,
            long_gap,
            estimated_run,
        },
        degraded_share: args.degraded_share,
        seed: args.seed,
        ..SynthSpec::default()
    };
    log_config("synth", &spec);
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let truth = write_dataset(&spec, &args.out)?;
    println!(
        "wrote {} accounts with {} injected defects to {}",
        truth.assignments.len(),
        truth.defects.len(),
        args.out.display()
    );
    Ok(())
}
