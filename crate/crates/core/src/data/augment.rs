//! Horizontal flip and random resized crop on `[h, w, c]` images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Transform set applied per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Transforms {
    /// Flip horizontally with probability 1/2.
    pub hflip: bool,
    /// Area fraction range of the random resized crop; `None` disables it.
    pub crop_scale: Option<[f64; 2]>,
}

impl Default for Transforms {
    fn default() -> Self {
        Self {
            hflip: true,
            crop_scale: Some([0.2, 1.0]),
        }
    }
}

impl Transforms {
    pub fn none() -> Self {
        Self {
            hflip: false,
            crop_scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some([lo, hi]) = self.crop_scale {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::config(format!("crop scale range [{lo}, {hi}] must lie in (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && self.crop_scale.is_none()
    }

    pub fn apply(&self, image: &Tensor<f32>, rng: &mut impl Rng) -> Tensor<f32> {
        let mut out = match self.crop_scale {
            Some(scale) => random_resized_crop(image, scale, rng),
            None => image.clone(),
        };
        if self.hflip && rng.random_bool(0.5) {
            out = hflip(&out);
        }
        out
    }
}

pub fn hflip(image: &Tensor<f32>) -> Tensor<f32> {
    let [h, w, c] = dims(image);
    let src = image.data();
    Tensor::from_fn([h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        src[(y * w + (w - 1 - x)) * c + ch]
    })
}

/// Crops `[top, top+ch) × [left, left+cw)` and resizes back to the input size
/// with bilinear interpolation (half-pixel centers).
pub fn resized_crop(image: &Tensor<f32>, top: usize, left: usize, ch: usize, cw: usize) -> Tensor<f32> {
    let [h, w, c] = dims(image);
    assert!(ch > 0 && cw > 0 && top + ch <= h && left + cw <= w, "crop outside image");
    let src = image.data();
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let wy = (fy - y0 as f64) as f32;
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let wx = (fx - x0 as f64) as f32;
            let px = |yy: usize, xx: usize, k: usize| src[((top + yy) * w + left + xx) * c + k];
            for k in 0..c {
                let a = px(y0, x0, k) * (1.0 - wx) + px(y0, x1, k) * wx;
                let b = px(y1, x0, k) * (1.0 - wx) + px(y1, x1, k) * wx;
                out.push(a * (1.0 - wy) + b * wy);
            }
        }
    }
    Tensor::new([h, w, c], out).expect("same shape as input")
}

/// Random area fraction from `scale`, aspect ratio log-uniform in [3/4, 4/3].
pub fn random_resized_crop(image: &Tensor<f32>, scale: [f64; 2], rng: &mut impl Rng) -> Tensor<f32> {
    let [h, w, _] = dims(image);
    let area = (h * w) as f64;
    let s = if scale[0] < scale[1] {
        rng.random_range(scale[0]..scale[1])
    } else {
        scale[0]
    };
    let log_r = rng.random_range((0.75f64).ln()..(4.0f64 / 3.0).ln());
    let r = log_r.exp();
    let cw = ((s * area * r).sqrt().round() as usize).clamp(1, w);
    let ch = ((s * area / r).sqrt().round() as usize).clamp(1, h);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    resized_crop(image, top, left, ch, cw)
}

fn dims(image: &Tensor<f32>) -> [usize; 3] {
    match image.shape() {
        &[h, w, c] => [h, w, c],
        s => panic!("expected [h, w, c] image, got {s:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flip_twice_is_identity() {
        let img = Tensor::from_fn([3, 4, 2], |i| i as f32);
        assert_eq!(hflip(&hflip(&img)), img);
        let f = hflip(&img);
        // pixel (0, 0) channel 1 comes from (0, 3)
        assert_eq!(f.data()[1], img.data()[3 * 2 + 1]);
    }

    #[test]
    fn full_crop_is_identity() {
        let img = Tensor::from_fn([6, 6, 3], |i| (i as f32).cos());
        assert_eq!(resized_crop(&img, 0, 0, 6, 6), img);
    }

    #[test]
    fn crop_of_constant_is_constant() {
        let img = Tensor::full([8, 8, 1], 0.25f32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let out = random_resized_crop(&img, [0.2, 1.0], &mut rng);
            assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        }
    }

    #[test]
    fn rejects_bad_scale() {
        let t = Transforms { hflip: false, crop_scale: Some([0.0, 1.0]) };
        assert!(t.validate().is_err());
        let t = Transforms { hflip: false, crop_scale: Some([0.8, 1.2]) };
        assert!(t.validate().is_err());
    }
}
