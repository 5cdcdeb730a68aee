//! Image retrieval with a triplet-trained ViT encoder and a pairwise
//! transformer reranker over concatenated image pairs.
//!
//! Pipeline: [`data`] supplies labeled images, [`mining`] trains the
//! encoder ([`vit`]) with batch-hard triplet loss and the pair head with
//! hard-pair BCE, [`index`] runs exact nearest-neighbor retrieval,
//! [`rerank`] rescores the top of each list and [`metrics`] scores the
//! result.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod index;
pub mod metrics;
pub mod mining;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod rerank;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Metric, Tensor};

/// Identifier of a dataset item (image).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(transparent)]
pub struct ItemId(pub u64);

impl std::fmt::Display for ItemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Class label (product / item identity).
pub type Label = u32;
