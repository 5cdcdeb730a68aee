//! Manifests, image payloads, synthetic data, protocol splits and embedding
//! files.

pub mod adapters;
pub mod augment;
pub(crate) mod binio;
pub mod embeddings;
pub mod images;
pub mod split;
pub mod synthetic;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{ItemId, Label};

pub use embeddings::{read_embeddings, write_embeddings, EmbeddingTable};
pub use split::{split_protocol, ProtocolSplit, RetrievalProtocol};
pub use synthetic::{generate_synthetic, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Gallery,
    Both,
}

/// One line of a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub item_id: ItemId,
    pub label_id: Label,
    pub split: Split,
    pub role: Role,
    /// Image payload reference: `<file>#<index>` for raw payload files,
    /// otherwise a path relative to the dataset root.
    pub source: String,
}

/// Dataset manifest stored as UTF-8 JSON lines, one record per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.item_id) {
                return Err(Error::input(format!("duplicate item_id {}", r.item_id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::format(format!("manifest line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(records)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    pub fn by_split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Labeled images held in memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledDataset {
    ids: Vec<ItemId>,
    labels: Vec<Label>,
    images: Vec<Tensor<f32>>,
    index: HashMap<ItemId, usize>,
}

impl LabeledDataset {
    pub fn new(ids: Vec<ItemId>, labels: Vec<Label>, images: Vec<Tensor<f32>>) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != images.len() {
            return Err(Error::input("ids, labels and images must have equal lengths"));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(Error::input(format!("duplicate item_id {id}")));
            }
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(Error::input("images differ in shape"));
            }
        }
        Ok(Self {
            ids,
            labels,
            images,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }

    pub fn position(&self, id: ItemId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn image(&self, id: ItemId) -> Option<&Tensor<f32>> {
        self.position(id).map(|i| &self.images[i])
    }

    pub fn label(&self, id: ItemId) -> Option<Label> {
        self.position(id).map(|i| self.labels[i])
    }

    /// Items with the given ids, in that order.
    pub fn subset(&self, ids: &[ItemId]) -> Result<Self> {
        let mut labels = Vec::with_capacity(ids.len());
        let mut images = Vec::with_capacity(ids.len());
        for &id in ids {
            let i = self.position(id).ok_or(Error::Resolution(id.0))?;
            labels.push(self.labels[i]);
            images.push(self.images[i].clone());
        }
        Self::new(ids.to_vec(), labels, images)
    }

    /// Loads every manifest record's image. Sources of the form
    /// `<file>#<index>` are read from raw payload files relative to `root`.
    pub fn load(manifest: &Manifest, root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut files: HashMap<PathBuf, images::ImageFile> = HashMap::new();
        let mut ids = Vec::with_capacity(manifest.len());
        let mut labels = Vec::with_capacity(manifest.len());
        let mut imgs = Vec::with_capacity(manifest.len());
        for r in &manifest.records {
            let (file, idx) = r
                .source
                .rsplit_once('#')
                .and_then(|(f, i)| i.parse::<usize>().ok().map(|i| (f, i)))
                .ok_or_else(|| {
                    Error::input(format!(
                        "item {}: source `{}` is not a raw payload reference; decode images first",
                        r.item_id, r.source
                    ))
                })?;
            let path = root.join(file);
            if !files.contains_key(&path) {
                let f = images::ImageFile::read(&path)?;
                files.insert(path.clone(), f);
            }
            let f = &files[&path];
            let (id, image) = f.get(idx).ok_or_else(|| {
                Error::input(format!("item {}: payload index {idx} out of range", r.item_id))
            })?;
            if id != r.item_id {
                return Err(Error::input(format!(
                    "item {}: payload entry {idx} holds item {id}",
                    r.item_id
                )));
            }
            ids.push(r.item_id);
            labels.push(r.label_id);
            imgs.push(image);
        }
        Self::new(ids, labels, imgs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, label: u32, split: Split, role: Role) -> ManifestRecord {
        ManifestRecord {
            item_id: ItemId(id),
            label_id: label,
            split,
            role,
            source: format!("images.bin#{id}"),
        }
    }

    #[test]
    fn manifest_jsonl_round_trip() {
        let m = Manifest::new(vec![
            rec(0, 1, Split::Train, Role::Both),
            rec(1, 2, Split::Test, Role::Query),
            rec(2, 2, Split::Test, Role::Gallery),
        ])
        .unwrap();
        let text = m.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with(r#"{"item_id":0,"label_id":1,"split":"train","role":"both","source":"images.bin#0"}"#));
        assert_eq!(Manifest::from_jsonl(&text).unwrap(), m);
    }

    #[test]
    fn manifest_rejects_duplicates_and_unknown_fields() {
        assert!(Manifest::new(vec![rec(0, 1, Split::Train, Role::Both), rec(0, 2, Split::Train, Role::Both)]).is_err());
        let bad = r#"{"item_id":0,"label_id":1,"split":"train","role":"both","source":"x#0","extra":1}"#;
        assert!(matches!(Manifest::from_jsonl(bad), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_subset_and_lookup() {
        let imgs: Vec<_> = (0..3).map(|i| Tensor::full([2, 2, 1], i as f32)).collect();
        let ds = LabeledDataset::new(vec![ItemId(5), ItemId(6), ItemId(7)], vec![0, 0, 1], imgs).unwrap();
        let sub = ds.subset(&[ItemId(7), ItemId(5)]).unwrap();
        assert_eq!(sub.labels(), &[1, 0]);
        assert_eq!(sub.image(ItemId(7)).unwrap().data()[0], 2.0);
        assert!(matches!(ds.subset(&[ItemId(9)]), Err(Error::Resolution(9))));
    }
}
