//! Optional JSON configuration file. Flags win over the file, the file wins
//! over built-in defaults.

use std::fs;
use std::path::Path;

use anyhow::Context;
use loadshape::cleanse::CleanseConfig;
use loadshape::cluster::{Init, KMeansConfig};
use loadshape::metrics::Measure;
use serde::{Deserialize, Serialize};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub threads: Option<usize>,
    pub cleanse: CleanseFile,
    pub kmeans: KMeansFile,
    pub report: ReportFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanseFile {
    pub short_gap_max_hours: Option<f64>,
    pub est_run_threshold_slots: Option<usize>,
    pub est_long_max_hours: Option<f64>,
    pub drop_quality_frac: Option<f64>,
    pub zero_run_exempt: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansFile {
    pub seed: Option<u64>,
    pub restarts: Option<usize>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub measure: Option<Measure>,
    pub init: Option<Init>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportFile {
    pub open_close_level: Option<f64>,
    pub z_threshold: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Command-line overrides for cleansing.
#[derive(Debug, Default)]
pub struct CleanseFlags {
    pub short_gap_max_hours: Option<f64>,
    pub est_run_threshold_slots: Option<usize>,
    pub est_long_max_hours: Option<f64>,
    pub drop_quality_frac: Option<f64>,
    pub no_zero_exempt: bool,
}

pub fn cleanse_config(flags: &CleanseFlags, file: &CleanseFile) -> CleanseConfig {
    let d = CleanseConfig::default();
    CleanseConfig {
        short_gap_max_hours: flags
            .short_gap_max_hours
            .or(file.short_gap_max_hours)
            .unwrap_or(d.short_gap_max_hours),
        est_run_threshold_slots: flags
            .est_run_threshold_slots
            .or(file.est_run_threshold_slots)
            .unwrap_or(d.est_run_threshold_slots),
        est_long_max_hours: flags
            .est_long_max_hours
            .or(file.est_long_max_hours)
            .unwrap_or(d.est_long_max_hours),
        drop_quality_frac: flags
            .drop_quality_frac
            .or(file.drop_quality_frac)
            .unwrap_or(d.drop_quality_frac),
        zero_run_exempt: if flags.no_zero_exempt {
            false
        } else {
            file.zero_run_exempt.unwrap_or(d.zero_run_exempt)
        },
    }
}

#[derive(Debug, Default)]
pub struct KMeansFlags {
    pub seed: Option<u64>,
    pub restarts: Option<usize>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub measure: Option<Measure>,
    pub init: Option<Init>,
}

pub fn kmeans_config(k: usize, flags: &KMeansFlags, file: &KMeansFile) -> KMeansConfig {
    let d = KMeansConfig::default();
    KMeansConfig {
        k,
        seed: flags.seed.or(file.seed).unwrap_or(d.seed),
        max_iter: flags.max_iter.or(file.max_iter).unwrap_or(d.max_iter),
        tol: flags.tol.or(file.tol).unwrap_or(d.tol),
        init: flags.init.or(file.init).unwrap_or(d.init),
        restarts: flags.restarts.or(file.restarts).unwrap_or(d.restarts),
        measure: flags.measure.or(file.measure).unwrap_or(d.measure),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportConfig {
    pub open_close_level: f64,
    pub z_threshold: f64,
}

pub fn report_config(level: Option<f64>, z: Option<f64>, file: &ReportFile) -> ReportConfig {
    ReportConfig {
        open_close_level: level.or(file.open_close_level).unwrap_or(0.5),
        z_threshold: z.or(file.z_threshold).unwrap_or(2.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: FileConfig = serde_json::from_str(
            r#"{"cleanse": {"short_gap_max_hours": 3, "drop_quality_frac": 0.3, "zero_run_exempt": true},
                "kmeans": {"seed": 5, "measure": "rms"}}"#,
        )
        .unwrap();
        let flags = CleanseFlags {
            short_gap_max_hours: Some(4.0),
            no_zero_exempt: true,
            ..Default::default()
        };
        let c = cleanse_config(&flags, &file.cleanse);
        assert_eq!(c.short_gap_max_hours, 4.0);
        assert_eq!(c.drop_quality_frac, 0.3);
        assert_eq!(c.est_run_threshold_slots, 12);
        assert!(!c.zero_run_exempt);

        let k = kmeans_config(
            3,
            &KMeansFlags {
                seed: Some(9),
                ..Default::default()
            },
            &file.kmeans,
        );
        assert_eq!(
            (k.k, k.seed, k.measure, k.restarts),
            (3, 9, Measure::RootMeanSquare, 10)
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"clense": {}}"#).is_err());
    }
}
