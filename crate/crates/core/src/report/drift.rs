use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ReportError;
use crate::cluster::Clustering;
use crate::metrics::euclidean;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMatch {
    pub a: Option<usize>,
    pub b: Option<usize>,
    /// Common accounts in the cluster during the first period.
    pub size_a: usize,
    /// Common accounts in the cluster during the second period.
    pub size_b: usize,
    pub stayed: usize,
    pub centroid_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flow {
    pub from_a: usize,
    pub to_b: usize,
    pub accounts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub common: usize,
    pub relocated: usize,
    pub relocated_accounts: Vec<String>,
    pub matches: Vec<ClusterMatch>,
    pub flows: Vec<Flow>,
}

/// Minimum-cost assignment of rows to distinct columns. Works on rectangular
/// matrices; when there are more rows than columns some rows stay `None`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols)
            .map(|j| (0..rows).map(|i| cost[i][j]).collect())
            .collect();
        let mut out = vec![None; rows];
        for (j, i) in hungarian(&t).into_iter().enumerate() {
            out[i] = Some(j);
        }
        return out;
    }
    hungarian(cost).into_iter().map(Some).collect()
}

/// Potential-based Hungarian method, rows <= cols.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost[0].len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Matches the clusters of two periods by centroid distance and counts the
/// accounts present in both that changed cluster.
pub fn compare_periods(a: &Clustering, b: &Clustering) -> Result<DriftReport, ReportError> {
    let na = a.centroids.first().map_or(0, Vec::len);
    let nb = b.centroids.first().map_or(0, Vec::len);
    if na != nb {
        return Err(ReportError::DimensionMismatch(na, nb));
    }
    let common: Vec<(&str, usize, usize)> = a
        .assignments
        .iter()
        .filter_map(|(id, &ca)| b.assignments.get(id).map(|&cb| (id.as_str(), ca, cb)))
        .collect();
    if common.is_empty() {
        return Err(ReportError::NoCommonAccounts);
    }

    let cost: Vec<Vec<f64>> = a
        .centroids
        .iter()
        .map(|x| {
            b.centroids
                .iter()
                .map(|y| euclidean(x, y).expect("equal lengths"))
                .collect()
        })
        .collect();
    let to_b = min_cost_assignment(&cost);

    let mut size_a = vec![0; a.k];
    let mut size_b = vec![0; b.k];
    let mut flows: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut relocated_accounts = Vec::new();
    for &(id, ca, cb) in &common {
        size_a[ca] += 1;
        size_b[cb] += 1;
        *flows.entry((ca, cb)).or_default() += 1;
        if to_b[ca] != Some(cb) {
            relocated_accounts.push(id.to_string());
        }
    }

    let mut matches = Vec::new();
    let mut b_matched = vec![false; b.k];
    for (ca, mb) in to_b.iter().enumerate() {
        match *mb {
            Some(cb) => {
                b_matched[cb] = true;
                matches.push(ClusterMatch {
                    a: Some(ca),
                    b: Some(cb),
                    size_a: size_a[ca],
                    size_b: size_b[cb],
                    stayed: flows.get(&(ca, cb)).copied().unwrap_or(0),
                    centroid_distance: Some(cost[ca][cb]),
                });
            }
            None => matches.push(ClusterMatch {
                a: Some(ca),
                b: None,
                size_a: size_a[ca],
                size_b: 0,
                stayed: 0,
                centroid_distance: None,
            }),
        }
    }
    for cb in (0..b.k).filter(|&cb| !b_matched[cb]) {
        matches.push(ClusterMatch {
            a: None,
            b: Some(cb),
            size_a: 0,
            size_b: size_b[cb],
            stayed: 0,
            centroid_distance: None,
        });
    }

    Ok(DriftReport {
        common: common.len(),
        relocated: relocated_accounts.len(),
        relocated_accounts,
        matches,
        flows: flows
            .into_iter()
            .map(|((from_a, to_b), accounts)| Flow {
                from_a,
                to_b,
                accounts,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::tests::clustering;
    use proptest::prelude::*;

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + go(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(cost, 0, &mut vec![false; cost[0].len()])
    }

    fn total(cost: &[Vec<f64>], a: &[Option<usize>]) -> f64 {
        a.iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| cost[i][j]))
            .sum()
    }

    #[test]
    fn small_assignment() {
        let cost = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        let a = min_cost_assignment(&cost);
        assert_eq!(a, vec![Some(1), Some(0), Some(2)]);
        assert_eq!(total(&cost, &a), 5.0);
    }

    #[test]
    fn more_rows_than_columns() {
        let cost = vec![vec![1.0], vec![0.5], vec![3.0]];
        assert_eq!(min_cost_assignment(&cost), vec![None, Some(0), None]);
    }

    #[test]
    fn relabeled_clusters_do_not_drift() {
        let a = clustering(
            &[("x", 0), ("y", 0), ("z", 1)],
            vec![vec![0.0, 0.0], vec![1.0, 1.0]],
        );
        let b = clustering(
            &[("x", 1), ("y", 1), ("z", 0)],
            vec![vec![1.0, 0.9], vec![0.0, 0.1]],
        );
        let d = compare_periods(&a, &b).unwrap();
        assert_eq!((d.common, d.relocated), (3, 0));
        assert_eq!(d.matches[0].b, Some(1));
        assert_eq!(d.matches[0].stayed, 2);
    }

    #[test]
    fn movers_are_counted() {
        let a = clustering(
            &[("p", 0), ("q", 0), ("r", 0), ("s", 1), ("only_a", 1)],
            vec![vec![0.0], vec![1.0]],
        );
        let b = clustering(
            &[("p", 0), ("q", 1), ("r", 1), ("s", 1), ("only_b", 0)],
            vec![vec![0.0], vec![1.0]],
        );
        let d = compare_periods(&a, &b).unwrap();
        assert_eq!(d.common, 4);
        assert_eq!(d.relocated, 2);
        assert_eq!(d.relocated_accounts, ["q", "r"]);
        assert_eq!((d.matches[0].size_a, d.matches[0].size_b), (3, 1));
        assert_eq!(
            d.flows,
            vec![
                Flow {
                    from_a: 0,
                    to_b: 0,
                    accounts: 1
                },
                Flow {
                    from_a: 0,
                    to_b: 1,
                    accounts: 2
                },
                Flow {
                    from_a: 1,
                    to_b: 1,
                    accounts: 1
                },
            ]
        );
    }

    #[test]
    fn disjoint_and_mismatched() {
        let a = clustering(&[("p", 0)], vec![vec![0.0]]);
        let b = clustering(&[("q", 0)], vec![vec![0.0]]);
        assert!(matches!(
            compare_periods(&a, &b),
            Err(ReportError::NoCommonAccounts)
        ));
        let c = clustering(&[("p", 0)], vec![vec![0.0, 1.0]]);
        assert!(matches!(
            compare_periods(&a, &c),
            Err(ReportError::DimensionMismatch(1, 2))
        ));
    }

    #[test]
    fn unequal_k_leaves_one_sided_matches() {
        let a = clustering(
            &[("p", 0), ("q", 1), ("r", 2)],
            vec![vec![0.0], vec![5.0], vec![10.0]],
        );
        let b = clustering(&[("p", 0), ("q", 1), ("r", 1)], vec![vec![0.1], vec![9.9]]);
        let d = compare_periods(&a, &b).unwrap();
        assert_eq!(d.matches.len(), 3);
        assert_eq!(d.matches[1].b, None);
        assert_eq!(d.relocated_accounts, ["q"]);
    }

    proptest! {
        #[test]
        fn optimal_against_brute_force(
            rows in 1usize..6,
            cols in 1usize..6,
            flat in proptest::collection::vec(0.0f64..10.0, 36),
        ) {
            let cost: Vec<Vec<f64>> = (0..rows).map(|i| flat[i * 6..i * 6 + cols].to_vec()).collect();
            let a = min_cost_assignment(&cost);
            let assigned: Vec<usize> = a.iter().flatten().copied().collect();
            prop_assert_eq!(assigned.len(), rows.min(cols));
            let mut uniq = assigned.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), assigned.len());
            let oracle = if rows <= cols {
                brute_force(&cost)
            } else {
                let t: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| cost[i][j]).collect()).collect();
                brute_force(&t)
            };
            prop_assert!((total(&cost, &a) - oracle).abs() < 1e-9);
        }
    }
}
