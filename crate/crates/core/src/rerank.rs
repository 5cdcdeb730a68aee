//! Top-n reranking with a pairwise scorer.
//!
//! Only the first `min(n, len)` entries are rescored and re-sorted among
//! themselves; the tail keeps its positions and distance scores. Rescored
//! probabilities and tail distances are on different scales, so the two
//! parts are never interleaved.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::index::{RankedEntry, RankedList};
use crate::par::{self, Exec};
use crate::tensor::{Tape, Tensor};
use crate::vit::EncoderWeights;
use crate::ItemId;

/// Scores `(query, gallery)` pairs; lower means more similar.
pub trait PairwiseScorer: Sync {
    type Item: ?Sized + Sync;

    /// Scores a batch of pairs, in order.
    fn score_pairs(&self, pairs: &[(&Self::Item, &Self::Item)]) -> Result<Vec<f64>>;

    fn score(&self, a: &Self::Item, b: &Self::Item) -> Result<f64> {
        Ok(self.score_pairs(&[(a, b)])?[0])
    }
}

/// Maps item ids to scorer inputs.
pub trait ItemResolver<I: ?Sized>: Sync {
    fn resolve(&self, id: ItemId) -> Result<&I>;
}

impl ItemResolver<Tensor<f32>> for LabeledDataset {
    fn resolve(&self, id: ItemId) -> Result<&Tensor<f32>> {
        self.image(id).ok_or(Error::Resolution(id.0))
    }
}

/// Resolves an id to itself, for scorers that work on ids directly.
#[derive(Debug, Clone, Default)]
pub struct IdResolver(pub HashSet<ItemId>);

impl ItemResolver<ItemId> for IdResolver {
    fn resolve(&self, id: ItemId) -> Result<&ItemId> {
        self.0.get(&id).ok_or(Error::Resolution(id.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankConfig {
    pub n: usize,
    pub symmetric: bool,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self { n: 5, symmetric: false }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("rerank depth n must be at least 1"));
        }
        Ok(())
    }
}

/// `(s(a, b) + s(b, a)) / 2`.
pub fn symmetric_score<S: PairwiseScorer>(scorer: &S, a: &S::Item, b: &S::Item) -> Result<f64> {
    let s = scorer.score_pairs(&[(a, b), (b, a)])?;
    Ok((s[0] + s[1]) / 2.0)
}

pub fn rerank<S, R>(list: &RankedList, scorer: &S, config: &RerankConfig, resolver: &R) -> Result<RankedList>
where
    S: PairwiseScorer,
    R: ItemResolver<S::Item>,
{
    config.validate()?;
    if list.is_empty() {
        return Err(Error::input(format!("ranked list for query {} is empty", list.query_id)));
    }
    let m = config.n.min(list.len());
    let query = resolver.resolve(list.query_id)?;
    let gallery = list.entries[..m]
        .iter()
        .map(|e| resolver.resolve(e.gallery_id))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs: Vec<(&S::Item, &S::Item)> = gallery.iter().map(|&g| (query, g)).collect();
    if config.symmetric {
        pairs.extend(gallery.iter().map(|&g| (g, query)));
    }
    let raw = scorer.score_pairs(&pairs)?;
    if raw.len() != pairs.len() {
        return Err(Error::input("scorer returned the wrong number of scores"));
    }
    if raw.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("pair score"));
    }
    let mut head: Vec<RankedEntry> = (0..m)
        .map(|i| RankedEntry {
            gallery_id: list.entries[i].gallery_id,
            score: if config.symmetric { (raw[i] + raw[m + i]) / 2.0 } else { raw[i] },
            rescored: true,
        })
        .collect();
    // stable: equal scores keep their original rank order
    head.sort_by(|a, b| a.score.total_cmp(&b.score));
    head.extend_from_slice(&list.entries[m..]);
    Ok(RankedList {
        query_id: list.query_id,
        entries: head,
    })
}

pub fn rerank_all<S, R>(
    lists: &[RankedList],
    scorer: &S,
    config: &RerankConfig,
    resolver: &R,
    exec: Exec,
) -> Result<Vec<RankedList>>
where
    S: PairwiseScorer,
    R: ItemResolver<S::Item>,
{
    par::try_map(exec, lists, |l| rerank(l, scorer, config, resolver))
}

/// Eval-mode pair model. One tape per call scores every pair in the batch
/// against a single binding of the weights.
#[derive(Debug, Clone)]
pub struct StirScorer {
    weights: EncoderWeights<f32>,
}

impl StirScorer {
    pub fn new(weights: EncoderWeights<f32>) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &EncoderWeights<f32> {
        &self.weights
    }
}

impl PairwiseScorer for StirScorer {
    type Item = Tensor<f32>;

    fn score_pairs(&self, pairs: &[(&Tensor<f32>, &Tensor<f32>)]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.weights.bind_frozen(&tape);
        pairs
            .iter()
            .map(|(a, b)| Ok(bound.score_pair(a, b, None)?.value().item()? as f64))
            .collect()
    }
}
