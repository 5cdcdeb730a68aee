//! Epoch loops for the triplet encoder and the pair head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{distance_matrix, mine_hard_pairs, mine_hard_triplets, pk_sample, triplet_batch_loss, Margin};
use crate::data::augment::Transforms;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::par::Exec;
use crate::tensor::{Gradients, Metric, Tape, Tensor, Var};
use crate::vit::{encode_batch, is_head_param, Bound, EncoderWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletHyper {
    pub margin: Margin,
    pub metric: Metric,
    pub num_labels: usize,
    pub instances_per_label: usize,
    pub lr: f64,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    /// Defaults to `ceil(train items / (P·K))`.
    pub batches_per_epoch: Option<usize>,
    pub transforms: Transforms,
}

impl Default for TripletHyper {
    fn default() -> Self {
        Self {
            margin: Margin::default(),
            metric: Metric::Cosine,
            num_labels: 8,
            instances_per_label: 4,
            lr: 3e-4,
            optimizer: AdamWConfig::default(),
            epochs: 60,
            batches_per_epoch: None,
            transforms: Transforms {
                hflip: false,
                crop_scale: Some([0.8, 1.0]),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StirHyper {
    pub metric: Metric,
    pub num_labels: usize,
    pub instances_per_label: usize,
    /// Hard pairs of each kind per batch; defaults to `P·K/2`.
    pub pairs_per_kind: Option<usize>,
    /// Learning rate while only the head trains.
    pub head_lr: f64,
    pub lr: f64,
    pub head_only_epochs: usize,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batches_per_epoch: Option<usize>,
    pub transforms: Transforms,
}

impl Default for StirHyper {
    fn default() -> Self {
        Self {
            metric: Metric::Cosine,
            num_labels: 8,
            instances_per_label: 4,
            pairs_per_kind: None,
            head_lr: 1e-2,
            lr: 1e-4,
            head_only_epochs: 5,
            optimizer: AdamWConfig::default(),
            epochs: 500,
            batches_per_epoch: None,
            transforms: Transforms {
                hflip: false,
                crop_scale: Some([0.8, 1.0]),
            },
        }
    }
}

fn validate_pk(p: usize, k: usize, lr: &[f64]) -> Result<()> {
    if p < 2 || k < 2 {
        return Err(Error::config("P and K must both be at least 2"));
    }
    if lr.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::config("learning rates must be positive"));
    }
    Ok(())
}

impl TripletHyper {
    pub fn validate(&self) -> Result<()> {
        validate_pk(self.num_labels, self.instances_per_label, &[self.lr])?;
        self.transforms.validate()
    }
}

impl StirHyper {
    pub fn validate(&self) -> Result<()> {
        validate_pk(self.num_labels, self.instances_per_label, &[self.lr, self.head_lr])?;
        if self.pairs_per_kind == Some(0) {
            return Err(Error::config("pairs_per_kind must be positive"));
        }
        self.transforms.validate()
    }

    pub fn head_only(&self, epoch: usize) -> bool {
        epoch < self.head_only_epochs
    }
}

/// SplitMix64 finaliser over a sequence of words; used to derive
/// independent seeds for batches and dropout masks.
pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

fn batches(dataset: &LabeledDataset, p: usize, k: usize, fixed: Option<usize>) -> Result<usize> {
    if dataset.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    Ok(fixed.unwrap_or_else(|| dataset.len().div_ceil(p * k)).max(1))
}

fn collect_grads(bound: &Bound<'_, f32>, grads: &Gradients<f32>) -> Vec<(String, Tensor<f32>)> {
    bound
        .vars()
        .filter_map(|(n, v)| grads.get(v).map(|g| (n.to_string(), g.clone())))
        .collect()
}

/// One epoch of batch-hard triplet training. Returns the mean batch loss.
pub fn train_triplet_epoch(
    dataset: &LabeledDataset,
    weights: &mut EncoderWeights<f32>,
    optimizer: &mut AdamW,
    hyper: &TripletHyper,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    hyper.validate()?;
    let (p, k) = (hyper.num_labels, hyper.instances_per_label);
    let n_batches = batches(dataset, p, k, hyper.batches_per_epoch)?;
    let mut total = 0.0;
    for b in 0..n_batches {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 1, epoch as u64, b as u64]));
        let batch = pk_sample(dataset.labels(), p, k, &mut rng)?;
        let images: Vec<Tensor<f32>> = batch
            .positions
            .iter()
            .map(|&i| hyper.transforms.apply(&dataset.images()[i], &mut rng))
            .collect();

        let tape = Tape::new();
        let bound = weights.bind(&tape, |_| true);
        let d = weights.config().embed_dim;
        let rows = images
            .iter()
            .map(|img| bound.embed(img)?.reshape([1, d]))
            .collect::<Result<Vec<_>>>()?;
        let emb = Var::concat(&rows, 0)?;
        let dist = emb.pairwise_distances(hyper.metric)?;
        let triplets = mine_hard_triplets(&dist.value(), &batch.labels)?;
        let loss = triplet_batch_loss(&dist, &triplets, hyper.margin)?;
        total += loss.value().item()? as f64;
        let grads = tape.backward(&loss)?;
        optimizer.step(weights, &collect_grads(&bound, &grads), hyper.lr);
    }
    Ok(total / n_batches as f64)
}

/// One epoch of pair-head training on hard pairs mined with the current
/// encoder. During head-only epochs every non-head parameter is bound as a
/// constant, so it receives no gradient and no update. Returns the mean
/// batch BCE.
pub fn train_stir_epoch(
    dataset: &LabeledDataset,
    weights: &mut EncoderWeights<f32>,
    optimizer: &mut AdamW,
    hyper: &StirHyper,
    seed: u64,
    epoch: usize,
    exec: Exec,
) -> Result<f64> {
    hyper.validate()?;
    let (p, k) = (hyper.num_labels, hyper.instances_per_label);
    let n_batches = batches(dataset, p, k, hyper.batches_per_epoch)?;
    let count = hyper.pairs_per_kind.unwrap_or(p * k / 2);
    let head_only = hyper.head_only(epoch);
    let lr = if head_only { hyper.head_lr } else { hyper.lr };
    let mut total = 0.0;
    for b in 0..n_batches {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 2, epoch as u64, b as u64]));
        let batch = pk_sample(dataset.labels(), p, k, &mut rng)?;
        let images: Vec<Tensor<f32>> = batch
            .positions
            .iter()
            .map(|&i| hyper.transforms.apply(&dataset.images()[i], &mut rng))
            .collect();
        let refs: Vec<&Tensor<f32>> = images.iter().collect();
        let emb = encode_batch(&refs, weights, exec)?;
        let d = weights.config().embed_dim;
        let emb = Tensor::new([emb.len(), d], emb.into_iter().flat_map(Tensor::into_data).collect())?;
        let mined = mine_hard_pairs(&distance_matrix(&emb, hyper.metric)?, &batch.labels, count)?;

        let tape = Tape::new();
        let bound = weights.bind(&tape, |name| !head_only || is_head_param(name));
        let mut probs = Vec::with_capacity(mined.pairs.len());
        let mut targets = Vec::with_capacity(mined.pairs.len());
        for (j, pair) in mined.pairs.iter().enumerate() {
            let dropout = derive_seed(&[seed, 3, epoch as u64, b as u64, j as u64]);
            probs.push(bound.score_pair(&images[pair.a], &images[pair.b], Some(dropout))?);
            targets.push(if pair.is_negative { 1.0f32 } else { 0.0 });
        }
        let loss = Var::concat(&probs, 0)?.bce(&targets)?;
        total += loss.value().item()? as f64;
        let grads = tape.backward(&loss)?;
        optimizer.step(weights, &collect_grads(&bound, &grads), lr);
    }
    Ok(total / n_batches as f64)
}
