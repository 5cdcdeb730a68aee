//! Procedural labeled images with planted class structure.
//!
//! Every class gets a base pattern: two colored sinusoidal gratings plus a
//! colored disk or square at a class-specific position. Items are the base
//! pattern under a random transform drawn from `SyntheticSpec` plus Gaussian pixel noise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::augment::Transforms;
use super::images::ImageFile;
use super::{LabeledDataset, Manifest, ManifestRecord, Role, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{ItemId, Label};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGES_FILE: &str = "images.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub items_per_class: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub transforms: Transforms,
    /// Items per class marked `test`; the rest are `train`.
    pub test_items_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 16,
            items_per_class: 12,
            image_h: 32,
            image_w: 32,
            channels: 3,
            noise_sigma: 0.3,
            transforms: Transforms {
                hflip: false,
                crop_scale: Some([0.6, 1.0]),
            },
            test_items_per_class: 6,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("items_per_class", self.items_per_class),
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise_sigma must be a nonnegative number"));
        }
        if self.test_items_per_class > self.items_per_class {
            return Err(Error::config("test_items_per_class exceeds items_per_class"));
        }
        self.transforms.validate()
    }
}

/// Generated manifest plus the images its records point to.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub manifest: Manifest,
    pub images: Vec<Tensor<f32>>,
}

impl SyntheticData {
    pub fn dataset(&self) -> Result<LabeledDataset> {
        LabeledDataset::new(
            self.manifest.records.iter().map(|r| r.item_id).collect(),
            self.manifest.records.iter().map(|r| r.label_id).collect(),
            self.images.clone(),
        )
    }

    /// Writes `manifest.jsonl` and `images.bin` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let shape: [usize; 3] = self.images[0].shape().try_into().expect("rank-3 images");
        let items: Vec<_> = self
            .manifest
            .records
            .iter()
            .zip(&self.images)
            .map(|(r, img)| (r.item_id, img))
            .collect();
        ImageFile::new(shape, &items)?.write(dir.join(IMAGES_FILE))?;
        self.manifest.write(dir.join(MANIFEST_FILE))
    }
}

struct Grating {
    freq: f64,
    cos: f64,
    sin: f64,
    phase: f64,
    color: Vec<f64>,
}

struct Blob {
    square: bool,
    cy: f64,
    cx: f64,
    radius: f64,
    color: Vec<f64>,
}

struct BasePattern {
    gratings: Vec<Grating>,
    blob: Blob,
}

impl BasePattern {
    fn sample(channels: usize, rng: &mut impl Rng) -> Self {
        let color = |rng: &mut dyn rand::RngCore, amp: f64| -> Vec<f64> {
            (0..channels).map(|_| amp * rng.random_range(-1.0..1.0)).collect()
        };
        let gratings = (0..2)
            .map(|_| {
                let theta = rng.random_range(0.0..PI);
                Grating {
                    freq: rng.random_range(1.5..4.0),
                    cos: theta.cos(),
                    sin: theta.sin(),
                    phase: rng.random_range(0.0..2.0 * PI),
                    color: color(rng, 0.5),
                }
            })
            .collect();
        let blob = Blob {
            square: rng.random_bool(0.5),
            cy: rng.random_range(0.25..0.75),
            cx: rng.random_range(0.25..0.75),
            radius: rng.random_range(0.12..0.22),
            color: color(rng, 1.0),
        };
        Self { gratings, blob }
    }

    fn render(&self, h: usize, w: usize, c: usize) -> Tensor<f32> {
        Tensor::from_fn([h, w, c], |i| {
            let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
            let v = (y as f64 + 0.5) / h as f64;
            let u = (x as f64 + 0.5) / w as f64;
            let mut val = 0.0;
            for g in &self.gratings {
                val += g.color[ch] * (2.0 * PI * g.freq * (u * g.cos + v * g.sin) + g.phase).sin();
            }
            let b = &self.blob;
            let (dy, dx) = (v - b.cy, u - b.cx);
            let inside = if b.square {
                dy.abs() <= b.radius && dx.abs() <= b.radius
            } else {
                dy * dy + dx * dx <= b.radius * b.radius
            };
            if inside {
                val += b.color[ch];
            }
            val as f32
        })
    }
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(1 << 20).wrapping_add(b));
    rng
}

/// Deterministic per seed. Item ids are `class · items_per_class + item`;
/// the last `test_items_per_class` items of each class are test items with
/// role `both`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (h, w, c) = (spec.image_h, spec.image_w, spec.channels);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut records = Vec::with_capacity(spec.num_classes * spec.items_per_class);
    let mut images = Vec::with_capacity(records.capacity());
    for class in 0..spec.num_classes {
        let base = BasePattern::sample(c, &mut stream(spec.seed, class as u64, 0)).render(h, w, c);
        for item in 0..spec.items_per_class {
            let mut rng = stream(spec.seed, class as u64, item as u64 + 1);
            let mut img = spec.transforms.apply(&base, &mut rng);
            if spec.noise_sigma > 0.0 {
                img.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += noise.sample(&mut rng) as f32);
            }
            let idx = records.len();
            let is_test = item >= spec.items_per_class - spec.test_items_per_class;
            records.push(ManifestRecord {
                item_id: ItemId(idx as u64),
                label_id: class as Label,
                split: if is_test { Split::Test } else { Split::Train },
                role: Role::Both,
                source: format!("{IMAGES_FILE}#{idx}"),
            });
            images.push(img);
        }
    }
    Ok(SyntheticData {
        manifest: Manifest::new(records)?,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 8,
            items_per_class: 6,
            test_items_per_class: 2,
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_balance() {
        let d = generate_synthetic(&small()).unwrap();
        assert_eq!(d.images.len(), 48);
        let mut hist = BTreeMap::new();
        for r in &d.manifest.records {
            *hist.entry(r.label_id).or_insert(0) += 1;
        }
        assert_eq!(hist.len(), 8);
        assert!(hist.values().all(|&n| n == 6));
        assert_eq!(d.manifest.by_split(Split::Test).count(), 16);
    }

    #[test]
    fn degenerate_spec_gives_identical_class_members() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            transforms: Transforms::none(),
            ..small()
        };
        let d = generate_synthetic(&spec).unwrap();
        for class in 0..8 {
            let first = &d.images[class * 6];
            for i in 1..6 {
                assert_eq!(&d.images[class * 6 + i], first);
            }
        }
        assert_ne!(d.images[0], d.images[6]);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn intra_class_closer_than_inter_class() {
        let d = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let labels: Vec<_> = d.manifest.records.iter().map(|r| r.label_id).collect();
        let dist = |a: &Tensor<f32>, b: &Tensor<f32>| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut intra, mut inter) = (Vec::new(), Vec::new());
        while intra.len() < 1000 || inter.len() < 1000 {
            let i = rng.random_range(0..labels.len());
            let j = rng.random_range(0..labels.len());
            if i == j {
                continue;
            }
            let v = dist(&d.images[i], &d.images[j]);
            if labels[i] == labels[j] {
                if intra.len() < 1000 {
                    intra.push(v);
                }
            } else if inter.len() < 1000 {
                inter.push(v);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&intra) < mean(&inter), "{} vs {}", mean(&intra), mean(&inter));
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic(&small()).unwrap();
        d.write(dir.path()).unwrap();
        let m = Manifest::read(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m, d.manifest);
        let ds = LabeledDataset::load(&m, dir.path()).unwrap();
        assert_eq!(ds, d.dataset().unwrap());
    }
}
