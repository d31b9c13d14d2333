use std::collections::BTreeMap;

use loadshape::cleanse::cleanse_pipeline;
use loadshape::cluster::{adjusted_rand_index, elbow, kmeans, sweep_k, KMeansConfig};
use loadshape::ingest::{assemble_series, parse_csv, MeterStore};
use loadshape::profile::{build_profiles, CalendarFilter, DayKind, ProfileOptions, ProfileSet};
use loadshape::synth::{generate_dataset, GroundTruth, SynthSpec};
use loadshape::{CleanseConfig, QualityFlag};

fn run(spec: &SynthSpec) -> (tempfile::TempDir, MeterStore, ProfileSet, GroundTruth) {
    let (csv, truth) = generate_dataset(spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut store = MeterStore::open(dir.path()).unwrap();
    let series = assemble_series(&parse_csv(csv.as_bytes()).unwrap())
        .unwrap()
        .series;
    store.store_batch(&series).unwrap();
    cleanse_pipeline(&mut store, &CleanseConfig::default()).unwrap();
    let filter = CalendarFilter::new([6], DayKind::Weekdays).unwrap();
    let set = build_profiles(&store, &filter, ProfileOptions::default()).unwrap();
    (dir, store, set, truth)
}

#[test]
fn noiseless_planting_is_recovered_exactly() {
    let spec = SynthSpec {
        noise_sigma: 0.0,
        months: Some((6, 6)),
        ..SynthSpec::planted(180, 9, 12)
    };
    let (_dir, _store, set, truth) = run(&spec);
    assert_eq!(set.len(), 180);

    let mut by_shape: BTreeMap<usize, &[f64]> = BTreeMap::new();
    for p in &set.profiles {
        let peak = p.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(peak, 1.0);
        let first = *by_shape
            .entry(truth.assignments[&p.account_id])
            .or_insert(&p.values);
        for (a, b) in first.iter().zip(&p.values) {
            assert!((a - b).abs() < 1e-12, "{}", p.account_id);
        }
    }
    assert_eq!(by_shape.len(), 9);

    let c = kmeans(&set, &KMeansConfig::new(9, 3)).unwrap();
    let (found, planted): (Vec<usize>, Vec<usize>) = c
        .assignments
        .iter()
        .map(|(id, &k)| (k, truth.assignments[id]))
        .unzip();
    assert_eq!(adjusted_rand_index(&found, &planted), 1.0);
}

#[test]
fn nine_planted_shapes_give_an_elbow_at_nine() {
    let spec = SynthSpec {
        months: Some((6, 6)),
        ..SynthSpec::planted(270, 9, 21)
    };
    let (_dir, _store, set, _) = run(&spec);
    let rows = sweep_k(&set, 2..=14, &KMeansConfig::new(2, 5)).unwrap();
    assert!(rows.windows(2).all(|w| w[1].objective <= w[0].objective));
    assert_eq!(elbow(&rows), Some(9));
}

#[test]
fn cleansed_store_round_trips_flags() {
    let mut spec = SynthSpec {
        months: Some((3, 6)),
        ..SynthSpec::planted(12, 3, 30)
    };
    spec.rates.short_gap = 1.0;
    spec.rates.estimated_run = 1.0;
    let (_dir, store, _, truth) = run(&spec);
    for id in truth.assignments.keys() {
        let s = store.load_series(id).unwrap();
        let status = store.entry(id).unwrap().cleansing.clone().unwrap();
        assert_eq!(status.interpolated, s.count_flag(QualityFlag::Interpolated));
        assert_eq!(s.count_flag(QualityFlag::Missing), 0);
        // every planted defect slot was repaired by interpolation
        let planted: usize = truth.defects_of(id).map(|d| d.slots).sum();
        assert_eq!(status.interpolated, planted, "{id}");
    }
}
