//! Manifest builders for the public In-Shop and Stanford Online Products
//! list files.
//!
//! Only the list files are parsed; image decoding is left to the caller, so
//! the resulting `source` fields are the relative image paths from the lists.
//! Decoded images must be written to a raw payload file
//! ([`super::images::ImageFile`]) before [`super::LabeledDataset::load`] can
//! use them.
//!
//! Path conventions:
//!
//! * In-Shop: `<root>/list_eval_partition.txt`, images under `<root>/img/`.
//!   The first line is the record count, the second the header
//!   `image_name item_id evaluation_status`; status is `train`, `query` or
//!   `gallery`.
//! * SOP: `<root>/Ebay_train.txt` and `<root>/Ebay_test.txt`, each with the
//!   header `image_id class_id super_class_id path`. SOP has no fixed
//!   query/gallery split, so test records get role `both` (leave-one-out).

use super::{Manifest, ManifestRecord, Role, Split};
use crate::error::{Error, Result};
use crate::{ItemId, Label};

fn parse_label(token: &str, line: usize) -> Result<Label> {
    let digits: String = token.chars().filter(char::is_ascii_digit).collect();
    digits
        .parse()
        .map_err(|_| Error::format(format!("line {line}: bad label `{token}`")))
}

/// Parses `list_eval_partition.txt`. Item ids follow file order.
pub fn inshop_manifest(list_eval_partition: &str) -> Result<Manifest> {
    let mut records = Vec::new();
    for (i, line) in list_eval_partition.lines().enumerate().skip(2) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [path, item, status] = fields[..] else {
            return Err(Error::format(format!("line {}: expected 3 fields", i + 1)));
        };
        let (split, role) = match status {
            "train" => (Split::Train, Role::Both),
            "query" => (Split::Test, Role::Query),
            "gallery" => (Split::Test, Role::Gallery),
            other => return Err(Error::format(format!("line {}: unknown status `{other}`", i + 1))),
        };
        records.push(ManifestRecord {
            item_id: ItemId(records.len() as u64),
            label_id: parse_label(item, i + 1)?,
            split,
            role,
            source: path.to_string(),
        });
    }
    Manifest::new(records)
}

/// Parses `Ebay_train.txt` and `Ebay_test.txt`. Item ids follow file order,
/// train first.
pub fn sop_manifest(train_list: &str, test_list: &str) -> Result<Manifest> {
    let mut records = Vec::new();
    for (text, split) in [(train_list, Split::Train), (test_list, Split::Test)] {
        for (i, line) in text.lines().enumerate().skip(1) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let [_, class, _, path] = fields[..] else {
                return Err(Error::format(format!("line {}: expected 4 fields", i + 1)));
            };
            records.push(ManifestRecord {
                item_id: ItemId(records.len() as u64),
                label_id: parse_label(class, i + 1)?,
                split,
                role: Role::Both,
                source: path.to_string(),
            });
        }
    }
    Manifest::new(records)
}
