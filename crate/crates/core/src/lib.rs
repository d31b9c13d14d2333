//! Smart-meter load shape mining.
//!
//! The pipeline runs raw interval readings through [`ingest`] into a file
//! store, repairs them with [`cleanse`], averages calendar-selected days into
//! peak-normalized 24-hour [`profile`]s, partitions accounts with k-means
//! ([`cluster`]) under the dissimilarities in [`metrics`], and turns the result
//! into peer-comparison output ([`report`]). [`synth`] produces datasets with
//! planted structure for end-to-end checks.

pub mod cleanse;
pub mod cluster;
pub mod ingest;
pub mod metrics;
pub mod profile;
pub mod report;
pub mod synth;

pub use cleanse::{CleanseConfig, CleanseReport};
pub use cluster::{Clustering, KMeansConfig};
pub use ingest::{Interval, MeterStore, QualityFlag, RawReading, ReadingSeries};
pub use metrics::{DistanceMatrix, Measure};
pub use profile::{CalendarFilter, DailyProfile, DayKind, ProfileSet};
