//! Lock-step dissimilarities between equal-length profiles and the pairwise
//! distance table.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::ProfileSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("vectors are empty")]
    Empty,
    #[error("a vector has no positive maximum")]
    ZeroMaximum,
    #[error("pair ({a}, {b}): {source}")]
    Pair {
        a: String,
        b: String,
        #[source]
        source: Box<MetricError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    /// Sum of squared slot differences.
    #[serde(rename = "dos")]
    DiffOfSquares,
    Euclidean,
    /// Euclidean distance divided by the slot count.
    #[serde(rename = "rms")]
    RootMeanSquare,
    /// Euclidean distance between peak-scaled vectors, divided by the slot count.
    #[serde(rename = "normmax")]
    NormalizedMax,
}

impl Measure {
    pub const ALL: [Measure; 4] = [
        Measure::DiffOfSquares,
        Measure::Euclidean,
        Measure::RootMeanSquare,
        Measure::NormalizedMax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::DiffOfSquares => "dos",
            Measure::Euclidean => "euclidean",
            Measure::RootMeanSquare => "rms",
            Measure::NormalizedMax => "normmax",
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
        match self {
            Measure::DiffOfSquares => diff_of_squares(a, b),
            Measure::Euclidean => euclidean(a, b),
            Measure::RootMeanSquare => root_mean_square(a, b),
            Measure::NormalizedMax => normalized_max(a, b),
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown measure `{s}` (dos, euclidean, rms, normmax)"))
    }
}

fn check(a: &[f64], b: &[f64]) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

/// Σ (a_k − b_k)²
pub fn diff_of_squares(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    check(a, b)?;
    Ok(squared_euclidean(a, b))
}

/// Unchecked Σ (a_k − b_k)² over the common prefix.
#[inline]
pub(crate) fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    diff_of_squares(a, b).map(f64::sqrt)
}

/// Euclidean distance over n. Note this is not √(mean squared difference).
pub fn root_mean_square(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    check(a, b)?;
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(squared_euclidean(a, b).sqrt() / a.len() as f64)
}

/// √(Σ (a_k/max a − b_k/max b)²) / n
pub fn normalized_max(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    check(a, b)?;
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let peak = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (pa, pb) = (peak(a), peak(b));
    if !(pa > 0.0 && pb > 0.0) {
        return Err(MetricError::ZeroMaximum);
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x / pa - y / pb;
            d * d
        })
        .sum();
    Ok(sum.sqrt() / a.len() as f64)
}

/// Symmetric N×N dissimilarity table, rows and columns in `accounts` order.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub measure: Measure,
    pub accounts: Vec<String>,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.accounts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accounts.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.len();
        &self.entries[i * n..(i + 1) * n]
    }

    /// CSV with account ids as header row and first column.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![String::new()];
        header.extend(self.accounts.iter().cloned());
        w.write_record(&header)?;
        for (i, id) in self.accounts.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(self.row(i).iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()
    }
}

/// Distance between every unordered pair of profiles, each evaluated once
/// with the lower index first.
pub fn pairwise_matrix(
    profiles: &ProfileSet,
    measure: Measure,
) -> Result<DistanceMatrix, MetricError> {
    let vectors: Vec<&[f64]> = profiles
        .profiles
        .iter()
        .map(|p| p.values.as_slice())
        .collect();
    let accounts: Vec<String> = profiles.account_ids().map(str::to_string).collect();
    let n = vectors.len();

    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| {
                    measure
                        .distance(vectors[i], vectors[j])
                        .map_err(|e| MetricError::Pair {
                            a: accounts[i].clone(),
                            b: accounts[j].clone(),
                            source: Box::new(e),
                        })
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;

    let mut entries = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &d) in row.iter().enumerate() {
            let j = i + 1 + off;
            entries[i * n + j] = d;
            entries[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix {
        measure,
        accounts,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::DailyProfile;

    fn set(vectors: &[&[f64]]) -> ProfileSet {
        let profiles = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| DailyProfile {
                account_id: format!("A{i}"),
                filter_label: "t".into(),
                values: v.to_vec(),
                normalized: false,
                norm_max: 1.0,
                day_count: 1,
            })
            .collect();
        ProfileSet::from_profiles("t", profiles)
    }

    #[test]
    fn worked_values() {
        let (a, b) = ([0.0, 3.0], [4.0, 0.0]);
        assert_eq!(diff_of_squares(&a, &b).unwrap(), 25.0);
        assert_eq!(euclidean(&a, &b).unwrap(), 5.0);
        assert_eq!(root_mean_square(&a, &b).unwrap(), 2.5);
        assert_eq!(diff_of_squares(&[2.0], &[5.0]).unwrap(), 9.0);
        assert_eq!(normalized_max(&[2.0, 4.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn self_distance_is_zero() {
        let a = [0.3, 0.9, 1.0, 0.2];
        for m in Measure::ALL {
            assert_eq!(m.distance(&a, &a).unwrap(), 0.0, "{m}");
        }
    }

    #[test]
    fn errors() {
        assert_eq!(
            diff_of_squares(&[1.0], &[1.0, 2.0]),
            Err(MetricError::LengthMismatch(1, 2))
        );
        assert_eq!(
            normalized_max(&[0.0, 0.0], &[1.0, 2.0]),
            Err(MetricError::ZeroMaximum)
        );
        assert_eq!(root_mean_square(&[], &[]), Err(MetricError::Empty));
    }

    #[test]
    fn measure_names_round_trip() {
        for m in Measure::ALL {
            assert_eq!(m.name().parse::<Measure>().unwrap(), m);
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.name())
            );
        }
        assert!("cosine".parse::<Measure>().is_err());
    }

    #[test]
    fn matrix_small_cases() {
        let m = pairwise_matrix(&set(&[&[1.0, 2.0]]), Measure::Euclidean).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.get(0, 0), 0.0);

        let m = pairwise_matrix(
            &set(&[&[0.0, 0.0], &[3.0, 4.0], &[6.0, 8.0]]),
            Measure::Euclidean,
        )
        .unwrap();
        // hand-computed pair distances 5, 10, 5
        assert_eq!(m.get(0, 1), 5.0);
        assert_eq!(m.get(0, 2), 10.0);
        assert_eq!(m.get(1, 2), 5.0);
        for i in 0..3 {
            assert_eq!(m.get(i, i), 0.0);
            for j in 0..3 {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }

    #[test]
    fn matrix_reports_offending_pair() {
        let err =
            pairwise_matrix(&set(&[&[1.0, 2.0], &[0.0, 0.0]]), Measure::NormalizedMax).unwrap_err();
        match err {
            MetricError::Pair { a, b, .. } => assert_eq!((a.as_str(), b.as_str()), ("A0", "A1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matrix_csv() {
        let m = pairwise_matrix(&set(&[&[0.0, 3.0], &[4.0, 0.0]]), Measure::Euclidean).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), ",A0,A1\nA0,0,5\nA1,5,0\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (1usize..100).prop_flat_map(|n| {
                (
                    proptest::collection::vec(0.01f64..10.0, n),
                    proptest::collection::vec(0.01f64..10.0, n),
                )
            })
        }

        fn rel(a: f64, b: f64) -> f64 {
            (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
        }

        proptest! {
            #[test]
            fn chain_identities((a, b) in pair()) {
                let n = a.len() as f64;
                let dos = diff_of_squares(&a, &b).unwrap();
                let e = euclidean(&a, &b).unwrap();
                prop_assert!(rel(e * e, dos) <= 1e-9 || dos == 0.0);
                prop_assert!(rel(root_mean_square(&a, &b).unwrap(), e / n) <= 1e-9 || e == 0.0);
                let peak = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max);
                let an: Vec<f64> = a.iter().map(|x| x / peak(&a)).collect();
                let bn: Vec<f64> = b.iter().map(|x| x / peak(&b)).collect();
                let nm = normalized_max(&a, &b).unwrap();
                let en = euclidean(&an, &bn).unwrap();
                prop_assert!(rel(nm * n, en) <= 1e-9 || en == 0.0);
            }

            #[test]
            fn symmetric_and_nonnegative((a, b) in pair()) {
                for m in Measure::ALL {
                    let ab = m.distance(&a, &b).unwrap();
                    prop_assert!(ab >= 0.0);
                    prop_assert_eq!(ab, m.distance(&b, &a).unwrap());
                }
            }

            #[test]
            fn normalized_max_ignores_scale((a, b) in pair(), c in 0.001f64..1000.0) {
                let ca: Vec<f64> = a.iter().map(|x| x * c).collect();
                let d1 = normalized_max(&a, &b).unwrap();
                let d2 = normalized_max(&ca, &b).unwrap();
                prop_assert!((d1 - d2).abs() <= 1e-9 * d1.max(1e-300) || (d1 - d2).abs() < 1e-15);
            }

            #[test]
            fn rms_is_homogeneous((a, b) in pair(), c in 0.001f64..1000.0) {
                let ca: Vec<f64> = a.iter().map(|x| x * c).collect();
                let cb: Vec<f64> = b.iter().map(|x| x * c).collect();
                let d = root_mean_square(&a, &b).unwrap();
                prop_assert!((root_mean_square(&ca, &cb).unwrap() - c * d).abs() <= 1e-9 * (c * d).max(1e-300));
            }
        }
    }
}
