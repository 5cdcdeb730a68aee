//! Exact brute-force retrieval.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::data::{EmbeddingTable, RetrievalProtocol};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::tensor::Metric;
use crate::{ItemId, Label};

/// Gallery rows scored per block.
const BLOCK: usize = 256;

/// Immutable gallery. Rows are held in f64; under cosine they are unit
/// length.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    ids: Vec<ItemId>,
    labels: Vec<Label>,
    rows: Vec<f64>,
    dim: usize,
    metric: Metric,
    position: HashMap<ItemId, usize>,
}

fn unit(v: &[f32]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::input("zero-norm or non-finite embedding under cosine metric"));
    }
    Ok(v.iter().map(|&x| x as f64 / norm).collect())
}

pub fn build_index(table: &EmbeddingTable, labels: Vec<Label>, metric: Metric) -> Result<GalleryIndex> {
    if labels.len() != table.len() {
        return Err(Error::input(format!("{} labels for {} embeddings", labels.len(), table.len())));
    }
    let mut position = HashMap::with_capacity(table.len());
    for (i, &id) in table.ids.iter().enumerate() {
        if position.insert(id, i).is_some() {
            return Err(Error::input(format!("duplicate gallery id {id}")));
        }
    }
    let dim = table.dim();
    let mut rows = Vec::with_capacity(table.len() * dim);
    for i in 0..table.len() {
        match metric {
            Metric::Cosine => rows.extend(unit(table.row(i))?),
            Metric::Euclidean => rows.extend(table.row(i).iter().map(|&x| x as f64)),
        }
    }
    Ok(GalleryIndex {
        ids: table.ids.clone(),
        labels,
        rows,
        dim,
        metric,
        position,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    pub gallery_id: ItemId,
    pub score: f64,
    /// Set when the score came from the pairwise reranker.
    pub rescored: bool,
}

/// Gallery entries in ascending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: ItemId,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.entries.iter().map(|e| e.gallery_id)
    }
}

impl GalleryIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label(&self, id: ItemId) -> Option<Label> {
        self.position.get(&id).map(|&i| self.labels[i])
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.position.contains_key(&id)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Top `k` gallery entries by ascending distance; ties go to the lower
    /// gallery id. `exclude` drops one id (leave-one-out self-match). The
    /// returned list carries `query_id`.
    pub fn search(&self, query_id: ItemId, query: &[f32], k: usize, exclude: Option<ItemId>) -> Result<RankedList> {
        if query.len() != self.dim {
            return Err(Error::shape(format!("query has dim {}, index has {}", query.len(), self.dim)));
        }
        let skip = exclude.and_then(|id| self.position.get(&id).copied());
        let effective = self.len() - usize::from(skip.is_some());
        if k == 0 || k > effective {
            return Err(Error::input(format!("k = {k} outside 1..={effective}")));
        }
        let q: Vec<f64> = match self.metric {
            Metric::Cosine => unit(query)?,
            Metric::Euclidean => query.iter().map(|&x| x as f64).collect(),
        };
        let mut scored: Vec<(f64, ItemId)> = Vec::with_capacity(effective);
        for start in (0..self.len()).step_by(BLOCK) {
            for i in start..(start + BLOCK).min(self.len()) {
                if Some(i) == skip {
                    continue;
                }
                let g = self.row(i);
                let s = match self.metric {
                    Metric::Cosine => 1.0 - q.iter().zip(g).map(|(a, b)| a * b).sum::<f64>(),
                    Metric::Euclidean => q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
                };
                if !s.is_finite() {
                    return Err(Error::NonFinite("retrieval score"));
                }
                scored.push((s, self.ids[i]));
            }
        }
        let cmp = |a: &(f64, ItemId), b: &(f64, ItemId)| -> Ordering { a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)) };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(RankedList {
            query_id,
            entries: scored
                .into_iter()
                .map(|(score, gallery_id)| RankedEntry {
                    gallery_id,
                    score,
                    rescored: false,
                })
                .collect(),
        })
    }
}

/// One ranked list per query, in query order.
///
/// `FixedSplit` requires query ids disjoint from the gallery and
/// `k ≤ |gallery|`. `LeaveOneOut` requires the query ids to be exactly the
/// gallery ids; each query excludes itself and `k` is clipped to `N − 1`.
pub fn run_protocol(
    queries: &EmbeddingTable,
    index: &GalleryIndex,
    protocol: RetrievalProtocol,
    k: usize,
    exec: Exec,
) -> Result<Vec<RankedList>> {
    if k == 0 {
        return Err(Error::input("k must be positive"));
    }
    let (k, self_exclude) = match protocol {
        RetrievalProtocol::FixedSplit => {
            if let Some(id) = queries.ids.iter().find(|id| index.contains(**id)) {
                return Err(Error::Protocol(format!("query {id} is also in the gallery")));
            }
            (k, false)
        }
        RetrievalProtocol::LeaveOneOut => {
            let q: HashSet<ItemId> = queries.ids.iter().copied().collect();
            if q.len() != queries.len() || q.len() != index.len() || !index.ids.iter().all(|id| q.contains(id)) {
                return Err(Error::Protocol("leave-one-out needs queries identical to the gallery".into()));
            }
            if index.len() < 2 {
                return Err(Error::Protocol("leave-one-out needs at least 2 items".into()));
            }
            (k.min(index.len() - 1), true)
        }
    };
    par::try_map_range(exec, queries.len(), |i| {
        let id = queries.ids[i];
        index.search(id, queries.row(i), k, self_exclude.then_some(id))
    })
}

/// `query_id,rank,gallery_id,score[,rescored]` with 1-based ranks and
/// scores at 6 decimals.
pub fn ranked_lists_csv(lists: &[RankedList], with_rescored: bool) -> String {
    let mut out = String::from("query_id,rank,gallery_id,score");
    out.push_str(if with_rescored { ",rescored\n" } else { "\n" });
    for list in lists {
        for (r, e) in list.entries.iter().enumerate() {
            let _ = write!(out, "{},{},{},{:.6}", list.query_id, r + 1, e.gallery_id, e.score);
            if with_rescored {
                let _ = write!(out, ",{}", u8::from(e.rescored));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::{any, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_table(n: usize, d: usize, first_id: u64, seed: u64) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = (0..n as u64).map(|i| ItemId(first_id + i)).collect();
        EmbeddingTable::new(ids, Tensor::from_fn([n, d], |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    fn oracle(table: &EmbeddingTable, q: &[f32], metric: Metric) -> Vec<ItemId> {
        let mut all: Vec<(f64, ItemId)> = (0..table.len())
            .map(|i| {
                let g = table.row(i);
                let d = match metric {
                    Metric::Euclidean => q.iter().zip(g).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt(),
                    Metric::Cosine => {
                        let dot: f64 = q.iter().zip(g).map(|(a, b)| *a as f64 * *b as f64).sum();
                        let nq = q.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                        let ng = g.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                        1.0 - dot / (nq * ng)
                    }
                };
                (d, table.ids[i])
            })
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().map(|x| x.1).collect()
    }

    #[test]
    fn build_examples() {
        let t = random_table(3, 4, 0, 1);
        let idx = build_index(&t, vec![0, 1, 2], Metric::Cosine).unwrap();
        assert_eq!(idx.len(), 3);
        for i in 0..3 {
            let n: f64 = idx.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let dup = EmbeddingTable::new(vec![ItemId(1), ItemId(1)], Tensor::ones([2, 2])).unwrap();
        assert!(build_index(&dup, vec![0, 0], Metric::Euclidean).is_err());
        let zero = EmbeddingTable::new(vec![ItemId(1)], Tensor::zeros([1, 2])).unwrap();
        assert!(matches!(build_index(&zero, vec![0], Metric::Cosine), Err(Error::Input(_))));
        assert!(build_index(&zero, vec![0], Metric::Euclidean).is_ok());
    }

    #[test]
    fn search_examples() {
        let t = random_table(50, 8, 100, 2);
        let idx = build_index(&t, vec![0; 50], Metric::Euclidean).unwrap();
        let q = ItemId(0);
        let hit = idx.search(q, t.row(17), 5, None).unwrap();
        assert_eq!(hit.entries[0].gallery_id, ItemId(117));
        assert_eq!(hit.entries[0].score, 0.0);
        let excl = idx.search(q, t.row(17), 49, Some(ItemId(117))).unwrap();
        assert!(excl.ids().all(|id| id != ItemId(117)));
        assert!(idx.search(q, t.row(17), 50, Some(ItemId(117))).is_err());
        assert!(idx.search(q, t.row(17), 0, None).is_err());

        let query = random_table(1, 8, 0, 3);
        for metric in [Metric::Euclidean, Metric::Cosine] {
            let idx = build_index(&t, vec![0; 50], metric).unwrap();
            let got: Vec<_> = idx.search(q, query.row(0), 10, None).unwrap().ids().collect();
            assert_eq!(got, oracle(&t, query.row(0), metric)[..10]);
        }
    }

    #[test]
    fn ties_go_to_lower_id() {
        let t = EmbeddingTable::new(vec![ItemId(9), ItemId(4), ItemId(7)], Tensor::ones([3, 2])).unwrap();
        let idx = build_index(&t, vec![0; 3], Metric::Cosine).unwrap();
        let ids: Vec<_> = idx.search(ItemId(0), &[1.0, 1.0], 3, None).unwrap().ids().collect();
        assert_eq!(ids, vec![ItemId(4), ItemId(7), ItemId(9)]);
    }

    proptest! {
        #[test]
        fn full_search_is_permutation_and_prefix_consistent(seed in any::<u64>(), k1 in 1usize..30) {
            let t = random_table(30, 4, 0, seed);
            let idx = build_index(&t, vec![0; 30], Metric::Euclidean).unwrap();
            let q = random_table(1, 4, 0, seed ^ 7);
            let full: Vec<_> = idx.search(ItemId(99), q.row(0), 30, None).unwrap().ids().collect();
            let mut sorted = full.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, t.ids.clone());
            let part: Vec<_> = idx.search(ItemId(99), q.row(0), k1, None).unwrap().ids().collect();
            prop_assert_eq!(&part[..], &full[..k1]);
        }
    }

    #[test]
    fn protocols() {
        let g = random_table(20, 6, 0, 4);
        let idx = build_index(&g, vec![0; 20], Metric::Cosine).unwrap();
        let q = random_table(2, 6, 100, 5);
        let lists = run_protocol(&q, &idx, RetrievalProtocol::FixedSplit, 7, Exec::Parallel).unwrap();
        assert_eq!(lists.len(), 2);
        assert!(lists.iter().all(|l| l.len() == 7));
        assert_eq!(lists[1].query_id, ItemId(101));
        assert!(run_protocol(&g, &idx, RetrievalProtocol::FixedSplit, 5, Exec::Parallel).is_err());
        assert!(run_protocol(&q, &idx, RetrievalProtocol::LeaveOneOut, 5, Exec::Parallel).is_err());

        let loo = run_protocol(&g, &idx, RetrievalProtocol::LeaveOneOut, 100, Exec::Parallel).unwrap();
        assert!(loo.iter().all(|l| l.len() == 19 && l.ids().all(|id| id != l.query_id)));

        let seq = run_protocol(&g, &idx, RetrievalProtocol::LeaveOneOut, 5, Exec::Sequential).unwrap();
        let mut perm_ids = g.ids.clone();
        perm_ids.reverse();
        let perm = EmbeddingTable::new(perm_ids, Tensor::from_fn([20, 6], |i| g.row(19 - i / 6)[i % 6])).unwrap();
        let rev = run_protocol(&perm, &idx, RetrievalProtocol::LeaveOneOut, 5, Exec::Parallel).unwrap();
        for (a, b) in seq.iter().zip(rev.iter().rev()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn csv_layout() {
        let list = RankedList {
            query_id: ItemId(3),
            entries: vec![RankedEntry {
                gallery_id: ItemId(8),
                score: 0.25,
                rescored: true,
            }],
        };
        assert_eq!(ranked_lists_csv(&[list.clone()], false), "query_id,rank,gallery_id,score\n3,1,8,0.250000\n");
        assert_eq!(
            ranked_lists_csv(&[list], true),
            "query_id,rank,gallery_id,score,rescored\n3,1,8,0.250000,1\n"
        );
    }
}
