//! Evaluation protocols: fixed query/gallery split and leave-one-out.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Manifest, Role, Split};
use crate::error::{Error, Result};
use crate::{ItemId, Label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalProtocol {
    /// Disjoint query and gallery sets.
    #[default]
    FixedSplit,
    /// Every test item queries all other test items.
    LeaveOneOut,
}

impl std::str::FromStr for RetrievalProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_split" => Ok(Self::FixedSplit),
            "leave_one_out" => Ok(Self::LeaveOneOut),
            other => Err(Error::config(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolSplit {
    pub protocol: RetrievalProtocol,
    pub train: Vec<ItemId>,
    pub query: Vec<ItemId>,
    pub gallery: Vec<ItemId>,
}

/// Fraction of a class's unassigned test items that become queries.
const QUERY_FRACTION: f64 = 0.5;

/// Splits a manifest for `protocol`.
///
/// Under `FixedSplit`, test records already tagged `query`/`gallery` keep
/// their role; records tagged `both` are assigned per class so that every
/// class keeps at least one query and one gallery item. Every query label is
/// then required to appear in the gallery. Under `LeaveOneOut` all test
/// records must be tagged `both` and serve as queries and gallery alike.
pub fn split_protocol(manifest: &Manifest, protocol: RetrievalProtocol, rng: &mut impl Rng) -> Result<ProtocolSplit> {
    manifest.validate()?;
    let train: Vec<ItemId> = manifest.by_split(Split::Train).map(|r| r.item_id).collect();
    let test: Vec<_> = manifest.by_split(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Protocol("manifest has no test records".into()));
    }
    match protocol {
        RetrievalProtocol::LeaveOneOut => {
            if let Some(r) = test.iter().find(|r| r.role != Role::Both) {
                return Err(Error::Protocol(format!(
                    "leave-one-out needs role `both`, item {} is {:?}",
                    r.item_id, r.role
                )));
            }
            let ids: Vec<ItemId> = test.iter().map(|r| r.item_id).collect();
            Ok(ProtocolSplit {
                protocol,
                train,
                query: ids.clone(),
                gallery: ids,
            })
        }
        RetrievalProtocol::FixedSplit => {
            let mut query = Vec::new();
            let mut gallery = Vec::new();
            let mut undecided: BTreeMap<Label, Vec<ItemId>> = BTreeMap::new();
            let mut fixed_q: BTreeMap<Label, usize> = BTreeMap::new();
            let mut fixed_g: BTreeMap<Label, usize> = BTreeMap::new();
            for r in &test {
                match r.role {
                    Role::Query => {
                        query.push(r.item_id);
                        *fixed_q.entry(r.label_id).or_default() += 1;
                    }
                    Role::Gallery => {
                        gallery.push(r.item_id);
                        *fixed_g.entry(r.label_id).or_default() += 1;
                    }
                    Role::Both => undecided.entry(r.label_id).or_default().push(r.item_id),
                }
            }
            for (label, mut items) in undecided {
                let has_q = fixed_q.get(&label).copied().unwrap_or(0) > 0;
                let has_g = fixed_g.get(&label).copied().unwrap_or(0) > 0;
                let n = items.len();
                let n_query = match (has_q, has_g) {
                    (true, true) => (n as f64 * QUERY_FRACTION).round() as usize,
                    (true, false) => 0,
                    (false, true) => n,
                    (false, false) => {
                        if n < 2 {
                            return Err(Error::Protocol(format!(
                                "class {label} has a single test item; cannot form a query and a gallery entry"
                            )));
                        }
                        ((n as f64 * QUERY_FRACTION).round() as usize).clamp(1, n - 1)
                    }
                };
                items.shuffle(rng);
                let (q, g) = items.split_at(n_query);
                query.extend_from_slice(q);
                gallery.extend_from_slice(g);
            }
            let label_of: std::collections::HashMap<ItemId, Label> =
                test.iter().map(|r| (r.item_id, r.label_id)).collect();
            let gallery_labels: HashSet<Label> = gallery.iter().map(|id| label_of[id]).collect();
            if let Some(q) = query.iter().find(|q| !gallery_labels.contains(&label_of[q])) {
                return Err(Error::Protocol(format!("query {q} has no relevant gallery item")));
            }
            query.sort_unstable();
            gallery.sort_unstable();
            Ok(ProtocolSplit {
                protocol,
                train,
                query,
                gallery,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ManifestRecord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn manifest(class_sizes: &[usize], role: Role) -> Manifest {
        let mut records = Vec::new();
        for (label, &n) in class_sizes.iter().enumerate() {
            for _ in 0..n {
                let id = records.len() as u64;
                records.push(ManifestRecord {
                    item_id: ItemId(id),
                    label_id: label as Label,
                    split: Split::Test,
                    role,
                    source: String::new(),
                });
            }
        }
        Manifest::new(records).unwrap()
    }

    #[test]
    fn fixed_split_covers_every_class() {
        let m = manifest(&[5, 2, 3, 7], Role::Both);
        let s = split_protocol(&m, RetrievalProtocol::FixedSplit, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let label = |id: &ItemId| m.records[id.0 as usize].label_id;
        for class in 0..4 {
            assert!(s.query.iter().any(|q| label(q) == class));
            assert!(s.gallery.iter().any(|g| label(g) == class));
        }
        assert_eq!(s.query.len() + s.gallery.len(), 17);
        let gq: HashSet<_> = s.query.iter().collect();
        assert!(s.gallery.iter().all(|g| !gq.contains(g)));
    }

    #[test]
    fn every_query_has_relevant_gallery_item() {
        for seed in 0..20 {
            let m = manifest(&[2, 3, 4, 5, 6, 9], Role::Both);
            let s = split_protocol(&m, RetrievalProtocol::FixedSplit, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for q in &s.query {
                let lq = m.records[q.0 as usize].label_id;
                assert!(s.gallery.iter().any(|g| m.records[g.0 as usize].label_id == lq));
            }
        }
    }

    #[test]
    fn singleton_class_cannot_be_split() {
        let m = manifest(&[3, 1], Role::Both);
        let r = split_protocol(&m, RetrievalProtocol::FixedSplit, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Protocol(_))));
    }

    #[test]
    fn leave_one_out_uses_test_set_twice() {
        let m = manifest(&[3, 4], Role::Both);
        let s = split_protocol(&m, RetrievalProtocol::LeaveOneOut, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.query, s.gallery);
        assert_eq!(s.query.len(), 7);

        let fixed = manifest(&[3], Role::Query);
        assert!(split_protocol(&fixed, RetrievalProtocol::LeaveOneOut, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
