//! File-backed meter store: one CSV per account plus a JSON manifest.
//!
//! Layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/series/<account>.csv      timestamp,energy_kwh,flag
//! ```
//!
//! Writers are serialized by a lock file and an optimistic generation check on
//! the manifest. Every file is written next to its destination and renamed into
//! place.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{parse_timestamp, Interval, QualityFlag, ReadingSeries, TIMESTAMP_FORMAT};

const MANIFEST: &str = "manifest.json";
const LOCK: &str = "manifest.lock";
const SERIES_DIR: &str = "series";
const SERIES_HEADER: &str = "timestamp,energy_kwh,flag";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("manifest changed or is locked by another writer ({0})")]
    ManifestConflict(String),
    #[error("unknown account `{0}`")]
    UnknownAccount(String),
    #[error("corrupt store file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Cleansing outcome recorded per account. Counts are of slots.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanseStatus {
    pub interpolated: usize,
    pub year_averaged: usize,
    pub estimated_excised: usize,
    pub missing_remaining: usize,
    pub dropped: bool,
    pub drop_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountEntry {
    pub file: String,
    pub interval_minutes: Interval,
    #[serde(with = "timestamp_serde")]
    pub start: NaiveDateTime,
    #[serde(with = "timestamp_serde")]
    pub end: NaiveDateTime,
    pub slots: usize,
    pub cleansing: Option<CleanseStatus>,
}

impl AccountEntry {
    pub fn is_dropped(&self) -> bool {
        self.cleansing.as_ref().is_some_and(|c| c.dropped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub generation: u64,
    pub accounts: BTreeMap<String, AccountEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            version: 1,
            generation: 0,
            accounts: BTreeMap::new(),
        }
    }
}

mod timestamp_serde {
    use chrono::NaiveDateTime;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&t.format(super::TIMESTAMP_FORMAT))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDateTime, D::Error> {
        let raw = String::deserialize(d)?;
        super::parse_timestamp(&raw)
            .ok_or_else(|| de::Error::custom(format!("bad timestamp {raw}")))
    }
}

/// Handle on a store directory.
#[derive(Debug)]
pub struct MeterStore {
    root: PathBuf,
    manifest: Manifest,
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

impl MeterStore {
    /// Opens (creating if needed) the store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let series_dir = root.join(SERIES_DIR);
        fs::create_dir_all(&series_dir).map_err(io_err(&series_dir))?;
        let manifest = read_manifest(&root)?.unwrap_or_default();
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn accounts(&self) -> impl Iterator<Item = &str> {
        self.manifest.accounts.keys().map(String::as_str)
    }

    pub fn entry(&self, account_id: &str) -> Option<&AccountEntry> {
        self.manifest.accounts.get(account_id)
    }

    /// Re-reads the manifest from disk, picking up other writers' commits.
    pub fn refresh(&mut self) -> Result<(), StoreError> {
        self.manifest = read_manifest(&self.root)?.unwrap_or_default();
        Ok(())
    }

    pub fn store_series(&mut self, series: &ReadingSeries) -> Result<(), StoreError> {
        self.store_batch(std::slice::from_ref(series))
    }

    /// Persists several series under one manifest commit. A stored account
    /// loses any previous cleansing status.
    pub fn store_batch(&mut self, series: &[ReadingSeries]) -> Result<(), StoreError> {
        self.commit(series, |_, _| None)
    }

    /// Writes back cleansed series together with their status.
    pub fn store_cleansed(
        &mut self,
        series: &[ReadingSeries],
        statuses: &BTreeMap<String, CleanseStatus>,
    ) -> Result<(), StoreError> {
        self.commit(series, |id, _| statuses.get(id).cloned())
    }

    pub fn load_series(&self, account_id: &str) -> Result<ReadingSeries, StoreError> {
        let entry = self
            .entry(account_id)
            .ok_or_else(|| StoreError::UnknownAccount(account_id.to_string()))?;
        let path = self.root.join(&entry.file);
        let file = File::open(&path).map_err(io_err(&path))?;
        let corrupt = |reason: String| StoreError::Corrupt {
            path: path.clone(),
            reason,
        };

        let mut lines = BufReader::new(file).lines();
        match lines.next() {
            Some(Ok(h)) if h == SERIES_HEADER => {}
            Some(Err(e)) => return Err(io_err(&path)(e)),
            _ => return Err(corrupt("missing header".into())),
        }
        let interval = entry.interval_minutes;
        let mut values = Vec::with_capacity(entry.slots);
        let mut flags = Vec::with_capacity(entry.slots);
        let step = interval.duration();
        let mut expected = entry.start;
        for (i, line) in lines.enumerate() {
            let line = line.map_err(io_err(&path))?;
            let mut fields = line.split(',');
            let (Some(t), Some(v), Some(f), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(corrupt(format!("row {}: malformed", i + 2)));
            };
            let t =
                parse_timestamp(t).ok_or_else(|| corrupt(format!("row {}: timestamp", i + 2)))?;
            if t != expected {
                return Err(corrupt(format!("row {}: slot grid broken", i + 2)));
            }
            expected += step;
            values.push(
                v.parse::<f64>()
                    .map_err(|e| corrupt(format!("row {}: {e}", i + 2)))?,
            );
            flags.push(
                f.parse::<QualityFlag>()
                    .map_err(|e| corrupt(format!("row {}: {e}", i + 2)))?,
            );
        }
        if values.len() != entry.slots {
            return Err(corrupt(format!(
                "manifest says {} slots, file has {}",
                entry.slots,
                values.len()
            )));
        }
        Ok(ReadingSeries::new(
            account_id,
            interval,
            entry.start,
            values,
            flags,
        ))
    }

    /// Serializes `value` as `<root>/<name>` via write-then-rename.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, StoreError> {
        let path = self.root.join(name);
        let mut body = serde_json::to_string_pretty(value).expect("serializable");
        body.push('\n');
        write_atomic(&path, body.as_bytes())?;
        Ok(path)
    }

    fn commit(
        &mut self,
        series: &[ReadingSeries],
        status_for: impl Fn(&str, &ReadingSeries) -> Option<CleanseStatus>,
    ) -> Result<(), StoreError> {
        let lock_path = self.root.join(LOCK);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock_path)
            .map_err(|e| match e.kind() {
                io::ErrorKind::AlreadyExists => StoreError::ManifestConflict(format!(
                    "lock file {} exists",
                    lock_path.display()
                )),
                _ => io_err(&lock_path)(e),
            })?;
        let _guard = LockGuard(lock_path);

        let on_disk = read_manifest(&self.root)?.map_or(0, |m| m.generation);
        if on_disk != self.manifest.generation {
            return Err(StoreError::ManifestConflict(format!(
                "expected generation {}, found {on_disk}",
                self.manifest.generation
            )));
        }

        let mut next = self.manifest.clone();
        for s in series {
            let Some(end) = s.end() else {
                return Err(StoreError::Corrupt {
                    path: self.root.clone(),
                    reason: format!("refusing to store empty series for {}", s.account_id),
                });
            };
            let file = format!("{SERIES_DIR}/{}.csv", file_stem(&s.account_id));
            write_atomic(&self.root.join(&file), render_series(s).as_bytes())?;
            next.accounts.insert(
                s.account_id.clone(),
                AccountEntry {
                    file,
                    interval_minutes: s.interval,
                    start: s.start,
                    end,
                    slots: s.len(),
                    cleansing: status_for(&s.account_id, s),
                },
            );
        }
        next.generation += 1;
        let mut body = serde_json::to_string_pretty(&next).expect("serializable");
        body.push('\n');
        write_atomic(&self.root.join(MANIFEST), body.as_bytes())?;
        self.manifest = next;
        Ok(())
    }
}

fn read_manifest(root: &Path) -> Result<Option<Manifest>, StoreError> {
    let path = root.join(MANIFEST);
    match fs::read_to_string(&path) {
        Ok(body) => serde_json::from_str(&body)
            .map(Some)
            .map_err(|e| StoreError::Corrupt {
                path,
                reason: e.to_string(),
            }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(&path)(e)),
    }
}

fn render_series(s: &ReadingSeries) -> String {
    let mut out = String::with_capacity(32 * (s.len() + 1));
    out.push_str(SERIES_HEADER);
    out.push('\n');
    for (i, (v, f)) in s.values.iter().zip(&s.flags).enumerate() {
        // `{}` on f64 is the shortest representation that parses back exactly.
        let _ = writeln!(out, "{},{v},{f}", s.slot_time(i).format(TIMESTAMP_FORMAT));
    }
    out
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Filesystem-safe, injective encoding of an account id.
fn file_stem(account_id: &str) -> String {
    let mut out = String::with_capacity(account_id.len());
    for (i, b) in account_id.bytes().enumerate() {
        let keep = b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || (b == b'.' && i > 0);
        if keep {
            out.push(b as char);
        } else {
            let _ = write!(out, "%{b:02X}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::parse_timestamp;

    fn sample(id: &str) -> ReadingSeries {
        ReadingSeries::new(
            id,
            Interval::Hour,
            parse_timestamp("2009-06-01T01:00").unwrap(),
            vec![0.1, 0.0, 1.0 / 3.0, 1e-7, 12345.678],
            vec![
                QualityFlag::Observed,
                QualityFlag::Missing,
                QualityFlag::Interpolated,
                QualityFlag::YearAveraged,
                QualityFlag::Estimated,
            ],
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = MeterStore::open(dir.path()).unwrap();
        let s = sample("A17");
        store.store_series(&s).unwrap();
        let back = MeterStore::open(dir.path())
            .unwrap()
            .load_series("A17")
            .unwrap();
        assert_eq!(back, s);
        for (a, b) in back.values.iter().zip(&s.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn second_store_replaces_first() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = MeterStore::open(dir.path()).unwrap();
        store.store_series(&sample("A")).unwrap();
        let mut other = sample("A");
        other.values[0] = 42.0;
        store.store_series(&other).unwrap();
        assert_eq!(store.manifest().accounts.len(), 1);
        assert_eq!(store.load_series("A").unwrap(), other);
    }

    #[test]
    fn unknown_account() {
        let dir = tempfile::tempdir().unwrap();
        let store = MeterStore::open(dir.path()).unwrap();
        assert!(matches!(
            store.load_series("nope"),
            Err(StoreError::UnknownAccount(_))
        ));
    }

    #[test]
    fn stale_handle_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = MeterStore::open(dir.path()).unwrap();
        let mut b = MeterStore::open(dir.path()).unwrap();
        a.store_series(&sample("A")).unwrap();
        assert!(matches!(
            b.store_series(&sample("B")),
            Err(StoreError::ManifestConflict(_))
        ));
        b.refresh().unwrap();
        b.store_series(&sample("B")).unwrap();
        assert_eq!(b.accounts().collect::<Vec<_>>(), ["A", "B"]);
    }

    #[test]
    fn held_lock_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = MeterStore::open(dir.path()).unwrap();
        File::create(dir.path().join(LOCK)).unwrap();
        assert!(matches!(
            a.store_series(&sample("A")),
            Err(StoreError::ManifestConflict(_))
        ));
    }

    #[cfg(unix)]
    #[test]
    fn read_only_root_is_io_error() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ro");
        fs::create_dir(&root).unwrap();
        fs::set_permissions(&root, fs::Permissions::from_mode(0o555)).unwrap();
        // root bypasses permission bits; nothing to assert there
        if File::create(root.join("probe")).is_ok() {
            return;
        }
        assert!(matches!(
            MeterStore::open(&root),
            Err(StoreError::Io { .. })
        ));
    }

    #[test]
    fn root_under_a_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        File::create(&file).unwrap();
        assert!(matches!(
            MeterStore::open(file.join("store")),
            Err(StoreError::Io { .. })
        ));
    }

    #[test]
    fn odd_account_ids_get_distinct_files() {
        assert_eq!(file_stem("A17"), "A17");
        assert_eq!(file_stem("a/b"), "a%2Fb");
        assert_ne!(file_stem("a/b"), file_stem("a%2Fb"));
        assert_eq!(file_stem(".."), "%2E.");
    }
}
