//! CMC, Recall, Precision and AP at k, and their means over queries.
//!
//! CMC@k is a hit indicator (any relevant item in the top k); Recall@k
//! divides the hits by the number of relevant items n_gt. The two coincide
//! only when every query has exactly one relevant item.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::index::RankedList;
use crate::par::{self, Exec};
use crate::{ItemId, Label};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceJudgment {
    pub query_id: ItemId,
    pub relevant: HashSet<ItemId>,
}

impl RelevanceJudgment {
    pub fn new(query_id: ItemId, relevant: HashSet<ItemId>) -> Result<Self> {
        if relevant.is_empty() {
            return Err(Error::input(format!("query {query_id} has no relevant items")));
        }
        Ok(Self { query_id, relevant })
    }

    pub fn n_gt(&self) -> usize {
        self.relevant.len()
    }

    fn hits<'a>(&'a self, list: &'a RankedList, k: usize) -> impl Iterator<Item = bool> + 'a {
        list.entries
            .iter()
            .take(k)
            .map(|e| self.relevant.contains(&e.gallery_id))
    }
}

/// Relevant items are the same-label gallery items, excluding the query
/// itself.
pub fn judgments_from_labels(
    queries: &[(ItemId, Label)],
    gallery: &[(ItemId, Label)],
) -> Result<Vec<RelevanceJudgment>> {
    let mut by_label: HashMap<Label, Vec<ItemId>> = HashMap::new();
    for &(id, l) in gallery {
        by_label.entry(l).or_default().push(id);
    }
    queries
        .iter()
        .map(|&(q, l)| {
            let relevant = by_label
                .get(&l)
                .map(|ids| ids.iter().copied().filter(|&g| g != q).collect())
                .unwrap_or_default();
            RelevanceJudgment::new(q, relevant)
        })
        .collect()
}

fn check_k(k: usize) {
    assert!(k >= 1, "k must be at least 1");
}

pub fn cmc_at_k(list: &RankedList, judgment: &RelevanceJudgment, k: usize) -> f64 {
    check_k(k);
    if judgment.hits(list, k).any(|h| h) {
        1.0
    } else {
        0.0
    }
}

pub fn recall_at_k(list: &RankedList, judgment: &RelevanceJudgment, k: usize) -> f64 {
    check_k(k);
    judgment.hits(list, k).filter(|&h| h).count() as f64 / judgment.n_gt() as f64
}

/// Hits in the top k over k, even when the list is shorter than k.
pub fn precision_at_k(list: &RankedList, judgment: &RelevanceJudgment, k: usize) -> f64 {
    check_k(k);
    judgment.hits(list, k).filter(|&h| h).count() as f64 / k as f64
}

/// Mean of Precision@i over the relevant positions i ≤ k; 0 without hits.
pub fn ap_at_k(list: &RankedList, judgment: &RelevanceJudgment, k: usize) -> f64 {
    check_k(k);
    let mut found = 0usize;
    let mut acc = 0.0;
    for (i, hit) in judgment.hits(list, k).enumerate() {
        if hit {
            found += 1;
            acc += found as f64 / (i + 1) as f64;
        }
    }
    if found == 0 {
        0.0
    } else {
        acc / found as f64
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Means over queries, keyed by k.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub num_queries: usize,
    pub k_values: Vec<usize>,
    pub cmc: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub precision: BTreeMap<usize, f64>,
    pub map: BTreeMap<usize, f64>,
}

pub fn evaluate(
    lists: &[RankedList],
    judgments: &[RelevanceJudgment],
    k_values: &[usize],
    exec: Exec,
) -> Result<MetricsReport> {
    if k_values.is_empty() || k_values.contains(&0) {
        return Err(Error::input("k values must be nonempty and positive"));
    }
    if lists.is_empty() {
        return Err(Error::input("no ranked lists to evaluate"));
    }
    let by_query: HashMap<ItemId, &RelevanceJudgment> = judgments.iter().map(|j| (j.query_id, j)).collect();
    let pairs: Vec<(&RankedList, &RelevanceJudgment)> = lists
        .iter()
        .map(|l| {
            by_query
                .get(&l.query_id)
                .map(|j| (l, *j))
                .ok_or_else(|| Error::input(format!("no judgment for query {}", l.query_id)))
        })
        .collect::<Result<_>>()?;
    // per query: [cmc, recall, precision, ap] for each k
    let per_query: Vec<Vec<[f64; 4]>> = par::map(exec, &pairs, |(l, j)| {
        k_values
            .iter()
            .map(|&k| [cmc_at_k(l, j, k), recall_at_k(l, j, k), precision_at_k(l, j, k), ap_at_k(l, j, k)])
            .collect()
    });
    let n = lists.len() as f64;
    let mut report = MetricsReport {
        num_queries: lists.len(),
        k_values: k_values.to_vec(),
        cmc: BTreeMap::new(),
        recall: BTreeMap::new(),
        precision: BTreeMap::new(),
        map: BTreeMap::new(),
    };
    for (ki, &k) in k_values.iter().enumerate() {
        let mean = |m: usize| compensated_sum(per_query.iter().map(|q| q[ki][m])) / n;
        report.cmc.insert(k, mean(0));
        report.recall.insert(k, mean(1));
        report.precision.insert(k, mean(2));
        report.map.insert(k, mean(3));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::RankedEntry;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    /// List of gallery ids 0..len; relevant ids given by the pattern.
    fn fixture(pattern: &[bool], extra_relevant: usize) -> (RankedList, RelevanceJudgment) {
        let entries = (0..pattern.len())
            .map(|i| RankedEntry {
                gallery_id: ItemId(i as u64),
                score: i as f64,
                rescored: false,
            })
            .collect();
        let mut relevant: HashSet<ItemId> = pattern
            .iter()
            .enumerate()
            .filter(|(_, &r)| r)
            .map(|(i, _)| ItemId(i as u64))
            .collect();
        relevant.extend((0..extra_relevant).map(|i| ItemId(1000 + i as u64)));
        let list = RankedList {
            query_id: ItemId(999),
            entries,
        };
        (list, RelevanceJudgment::new(ItemId(999), relevant).unwrap())
    }

    #[test]
    fn examples() {
        let (l, j) = fixture(&[false, false, true, false, false], 0);
        assert_eq!(cmc_at_k(&l, &j, 5), 1.0);
        assert_eq!(cmc_at_k(&l, &j, 2), 0.0);
        let (l, j) = fixture(&[false, false], 1);
        assert_eq!(cmc_at_k(&l, &j, 2), 0.0);

        let (l, j) = fixture(&[true, false, true, false, false], 2);
        assert_eq!(recall_at_k(&l, &j, 5), 0.5);
        let (l, j) = fixture(&[true, false], 2);
        assert_eq!(recall_at_k(&l, &j, 1), 1.0 / 3.0);

        let (l, j) = fixture(&[true, false, true, false], 0);
        assert_eq!(precision_at_k(&l, &j, 4), 0.5);
        let (l, j) = fixture(&[true, true, true], 0);
        assert_eq!(precision_at_k(&l, &j, 5), 0.6);

        let (l, j) = fixture(&[true, false, true], 0);
        assert!((ap_at_k(&l, &j, 3) - 5.0 / 6.0).abs() < 1e-15);
        let (l, j) = fixture(&[true, true, true, false], 3);
        assert_eq!(ap_at_k(&l, &j, 3), 1.0);
        let (l, j) = fixture(&[false, false], 1);
        assert_eq!(ap_at_k(&l, &j, 2), 0.0);
    }

    #[test]
    fn evaluate_examples() {
        let (l1, j1) = fixture(&[true, false], 0);
        let r = evaluate(&[l1.clone()], &[j1.clone()], &[1], Exec::Sequential).unwrap();
        assert_eq!((r.cmc[&1], r.recall[&1], r.precision[&1], r.map[&1]), (1.0, 1.0, 1.0, 1.0));

        let (mut l2, mut j2) = fixture(&[false, true], 0);
        l2.query_id = ItemId(5);
        j2.query_id = ItemId(5);
        let r = evaluate(&[l1.clone(), l2], &[j1.clone(), j2], &[1, 2], Exec::Parallel).unwrap();
        assert_eq!(r.cmc[&1], 0.5);
        assert_eq!(r.cmc[&2], 1.0);

        let mut orphan = l1.clone();
        orphan.query_id = ItemId(77);
        assert!(evaluate(&[orphan], &[j1], &[1], Exec::Sequential).is_err());
    }

    #[test]
    fn judgments_exclude_self() {
        let items = [(ItemId(0), 1), (ItemId(1), 1), (ItemId(2), 2)];
        let j = judgments_from_labels(&items[..2], &items).unwrap();
        assert_eq!(j[0].relevant, HashSet::from([ItemId(1)]));
        assert!(judgments_from_labels(&items[2..], &items).is_err());
    }

    #[test]
    fn compensated_sum_recovers_cancellation() {
        assert_eq!(compensated_sum([1.0, 1e100, 1.0, -1e100]), 2.0);
    }

    proptest! {
        #[test]
        fn monotone_bounded_and_consistent(pattern in prop::collection::vec(prop::bool::ANY, 1..30), extra in 0usize..4) {
            prop_assume_relevant(&pattern, extra)?;
            let (l, j) = fixture(&pattern, extra);
            let mut prev = (0.0, 0.0);
            for k in 1..=35 {
                let (c, r) = (cmc_at_k(&l, &j, k), recall_at_k(&l, &j, k));
                prop_assert!(c >= prev.0 && r >= prev.1);
                prev = (c, r);
                let ap = ap_at_k(&l, &j, k);
                prop_assert!((0.0..=1.0).contains(&ap));
                let need = k.min(j.n_gt());
                if l.len() >= need && pattern[..need].iter().all(|&x| x) {
                    prop_assert_eq!(ap, 1.0);
                }
                // dividing by n_k: AP is 1 exactly when the hits in the top k
                // form a nonempty prefix
                let top = &pattern[..k.min(pattern.len())];
                let n_k = top.iter().filter(|&&x| x).count();
                prop_assert_eq!(ap == 1.0, n_k > 0 && top[..n_k].iter().all(|&x| x));
                if j.n_gt() == 1 {
                    prop_assert_eq!(c, r);
                }
            }
            prop_assert!(recall_at_k(&l, &j, 1) <= 1.0 / j.n_gt() as f64);
        }
    }

    fn prop_assume_relevant(pattern: &[bool], extra: usize) -> Result<(), proptest::test_runner::TestCaseError> {
        if extra == 0 && !pattern.iter().any(|&x| x) {
            return Err(proptest::test_runner::TestCaseError::reject("no relevant items"));
        }
        Ok(())
    }
}
