//! PK batch sampling, batch-hard mining and the two training objectives.

mod train;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{real, Metric, Real, Tensor, Var};
use crate::Label;

pub(crate) use train::derive_seed;
pub use train::{train_stir_epoch, train_triplet_epoch, StirHyper, TripletHyper};

/// Positions into a dataset, `num_labels` classes × `instances_per_label`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    pub positions: Vec<usize>,
    pub labels: Vec<Label>,
    pub num_labels: usize,
    pub instances_per_label: usize,
}

impl PkBatch {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Draws `num_labels` distinct classes and `instances_per_label` items of
/// each. Classes smaller than K contribute every item once, then fill the
/// remaining slots by sampling with replacement.
pub fn pk_sample(
    labels: &[Label],
    num_labels: usize,
    instances_per_label: usize,
    rng: &mut impl Rng,
) -> Result<PkBatch> {
    if num_labels == 0 || instances_per_label == 0 {
        return Err(Error::Sampling("P and K must be positive".into()));
    }
    let mut groups: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.len() < num_labels {
        return Err(Error::Sampling(format!(
            "need {num_labels} classes, dataset has {}",
            groups.len()
        )));
    }
    let mut classes: Vec<Label> = groups.keys().copied().collect();
    let (chosen, _) = classes.partial_shuffle(rng, num_labels);
    let k = instances_per_label;
    let mut positions = Vec::with_capacity(num_labels * k);
    let mut batch_labels = Vec::with_capacity(num_labels * k);
    for &label in chosen.iter() {
        let mut members = groups[&label].clone();
        if members.len() >= k {
            let (picked, _) = members.partial_shuffle(rng, k);
            positions.extend_from_slice(picked);
        } else {
            members.shuffle(rng);
            positions.extend_from_slice(&members);
            for _ in members.len()..k {
                positions.push(*members.choose(rng).expect("nonempty class"));
            }
        }
        batch_labels.extend(std::iter::repeat_n(label, k));
    }
    Ok(PkBatch {
        positions,
        labels: batch_labels,
        num_labels,
        instances_per_label: k,
    })
}

/// `[N, N]` distances between the rows of `embeddings`.
pub fn distance_matrix<T: Real>(embeddings: &Tensor<T>, metric: Metric) -> Result<Tensor<T>> {
    let (n, _) = embeddings.dims2()?;
    if n < 2 {
        return Err(Error::input("distance matrix needs at least 2 rows"));
    }
    embeddings.pairwise_distances(metric)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabeledPair {
    pub a: usize,
    pub b: usize,
    pub is_negative: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Margin(f64);

impl Margin {
    pub fn new(m: f64) -> Result<Self> {
        if m >= 0.0 && m.is_finite() {
            Ok(Self(m))
        } else {
            Err(Error::config(format!("margin must be a nonnegative number, got {m}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Margin {
    fn default() -> Self {
        Self(0.15)
    }
}

impl TryFrom<f64> for Margin {
    type Error = Error;

    fn try_from(m: f64) -> Result<Self> {
        Self::new(m)
    }
}

impl From<Margin> for f64 {
    fn from(m: Margin) -> f64 {
        m.0
    }
}

fn check_square<T: Real>(dist: &Tensor<T>, labels: &[Label]) -> Result<usize> {
    let (n, m) = dist.dims2()?;
    if n != m || n != labels.len() {
        return Err(Error::shape(format!(
            "distance matrix {:?} does not match {} labels",
            dist.shape(),
            labels.len()
        )));
    }
    Ok(n)
}

/// One triplet per anchor: farthest same-label item, nearest other-label
/// item, ties to the lowest index.
pub fn mine_hard_triplets<T: Real>(dist: &Tensor<T>, labels: &[Label]) -> Result<Vec<Triplet>> {
    let n = check_square(dist, labels)?;
    let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Mining(format!("label {l} has a single instance")));
    }
    if counts.len() < 2 {
        return Err(Error::Mining("need at least 2 distinct labels".into()));
    }
    Ok((0..n)
        .map(|a| {
            let row = dist.row(a);
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    if pos.is_none_or(|p| row[j] > row[p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|q| row[j] < row[q]) {
                    neg = Some(j);
                }
            }
            Triplet {
                anchor: a,
                positive: pos.expect("label has another instance"),
                negative: neg.expect("another label exists"),
            }
        })
        .collect())
}

/// `max(0, d_qp − d_qn + m)`.
pub fn triplet_loss(d_qp: f64, d_qn: f64, margin: Margin) -> f64 {
    (d_qp - d_qn + margin.get()).max(0.0)
}

/// Mean triplet loss over `triplets`, differentiable through `dist`.
pub fn triplet_batch_loss<'t, T: Real>(dist: &Var<'t, T>, triplets: &[Triplet], margin: Margin) -> Result<Var<'t, T>> {
    let n = dist.shape()[0];
    let pos: Vec<usize> = triplets.iter().map(|t| t.anchor * n + t.positive).collect();
    let neg: Vec<usize> = triplets.iter().map(|t| t.anchor * n + t.negative).collect();
    dist.gather(&pos)?
        .sub(&dist.gather(&neg)?)?
        .add_scalar(real(margin.get()))?
        .relu()?
        .mean()
}

/// Mined pairs: positives first (farthest first), then negatives (nearest
/// first). `truncated` is set when either kind had fewer candidates than
/// requested.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardPairs {
    pub pairs: Vec<LabeledPair>,
    pub truncated: bool,
}

/// Top `count_per_kind` same-label pairs by descending distance and
/// different-label pairs by ascending distance, over unordered pairs
/// `a < b`. Ties go to the lexicographically smaller `(a, b)`.
pub fn mine_hard_pairs<T: Real>(dist: &Tensor<T>, labels: &[Label], count_per_kind: usize) -> Result<HardPairs> {
    let n = check_square(dist, labels)?;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let entry = (dist.at2(a, b), a, b);
            if labels[a] == labels[b] {
                positives.push(entry);
            } else {
                negatives.push(entry);
            }
        }
    }
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Mining("need at least one positive and one negative pair".into()));
    }
    let by_index = |x: &(T, usize, usize), y: &(T, usize, usize)| (x.1, x.2).cmp(&(y.1, y.2));
    let desc = |x: &(T, usize, usize), y: &(T, usize, usize)| -> Ordering {
        y.0.partial_cmp(&x.0).unwrap_or(Ordering::Equal).then_with(|| by_index(x, y))
    };
    let asc = |x: &(T, usize, usize), y: &(T, usize, usize)| -> Ordering {
        x.0.partial_cmp(&y.0).unwrap_or(Ordering::Equal).then_with(|| by_index(x, y))
    };
    positives.sort_by(desc);
    negatives.sort_by(asc);
    let truncated = positives.len() < count_per_kind || negatives.len() < count_per_kind;
    let take = |v: Vec<(T, usize, usize)>, is_negative: bool| {
        v.into_iter()
            .take(count_per_kind)
            .map(move |(_, a, b)| LabeledPair { a, b, is_negative })
    };
    let pairs = take(positives, false).chain(take(negatives, true)).collect();
    Ok(HardPairs { pairs, truncated })
}
