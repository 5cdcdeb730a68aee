//! Small ViT-style encoder and the pair-scoring head.
//!
//! Single images are encoded into retrieval embeddings. For pair scoring the
//! query and gallery image are concatenated side by side (along the width),
//! encoded as one token sequence with its own positional table, mean-pooled
//! and passed to a two-layer head that outputs the probability that the pair
//! is *negative* (lower means more similar).

pub mod checkpoint;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::tensor::{real, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    pub normalize_embeddings: bool,
    /// Dropout between the two pair-head layers (train mode only).
    pub head_dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_h: 32,
            image_w: 32,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            num_heads: 4,
            depth: 2,
            mlp_ratio: 2.0,
            normalize_embeddings: true,
            head_dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.embed_dim < 2 {
            return Err(Error::config("embed_dim must be at least 2"));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::config("head_dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_hidden(&self) -> usize {
        self.embed_dim / 2
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_h, self.image_w, self.channels]
    }

    /// Parameter names and shapes, in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let np = self.num_patches();
        let mut out = vec![
            ("patch.w".to_string(), vec![self.patch_dim(), d]),
            ("patch.b".to_string(), vec![d]),
            ("pos.single".to_string(), vec![np, d]),
            ("pos.pair".to_string(), vec![2 * np, d]),
        ];
        for b in 0..self.depth {
            let p = |s: &str| format!("blocks.{b}.{s}");
            out.extend([
                (p("norm1.g"), vec![d]),
                (p("norm1.b"), vec![d]),
                (p("attn.q.w"), vec![d, d]),
                (p("attn.q.b"), vec![d]),
                (p("attn.k.w"), vec![d, d]),
                (p("attn.k.b"), vec![d]),
                (p("attn.v.w"), vec![d, d]),
                (p("attn.v.b"), vec![d]),
                (p("attn.o.w"), vec![d, d]),
                (p("attn.o.b"), vec![d]),
                (p("norm2.g"), vec![d]),
                (p("norm2.b"), vec![d]),
                (p("mlp.fc1.w"), vec![d, h]),
                (p("mlp.fc1.b"), vec![h]),
                (p("mlp.fc2.w"), vec![h, d]),
                (p("mlp.fc2.b"), vec![d]),
            ]);
        }
        out.extend([
            ("norm.g".to_string(), vec![d]),
            ("norm.b".to_string(), vec![d]),
            ("head.fc1.w".to_string(), vec![d, self.head_hidden()]),
            ("head.fc1.b".to_string(), vec![self.head_hidden()]),
            ("head.fc2.w".to_string(), vec![self.head_hidden(), 1]),
            ("head.fc2.b".to_string(), vec![1]),
        ]);
        out
    }
}

/// True for parameters of the pair-scoring head.
pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

/// All learnable parameters: encoder, both positional tables and pair head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T = f32> {
    config: EncoderConfig,
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Real> EncoderWeights<T> {
    /// Builds weights from named tensors, checking names and shapes against
    /// `config`.
    pub fn from_params(config: EncoderConfig, mut params: IndexMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if params.len() != expected.len() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        let mut ordered = IndexMap::with_capacity(expected.len());
        for (name, shape) in expected {
            let t = params
                .shift_remove(&name)
                .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::config(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            ordered.insert(name, t);
        }
        Ok(Self { config, params: ordered })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> EncoderWeights<U> {
        EncoderWeights {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Overwrites the pair positional table with copies of the single-image
    /// table: left and right halves of each patch row share positions.
    pub fn sync_pair_positions(&mut self) {
        let (rows, cols) = self.config.grid();
        let d = self.config.embed_dim;
        let single = self.params["pos.single"].clone();
        let pair = self.params.get_mut("pos.pair").expect("pos.pair present");
        for r in 0..rows {
            for cc in 0..2 * cols {
                let src = (r * cols + cc % cols) * d;
                let dst = (r * 2 * cols + cc) * d;
                pair.data_mut()[dst..dst + d].copy_from_slice(&single.data()[src..src + d]);
            }
        }
    }

    /// Registers every parameter on `tape`; names for which `trainable`
    /// returns false become constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound {
            config: self.config.clone(),
            vars,
        }
    }

    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.bind(tape, |_| false)
    }
}

/// Scaled-normal initialisation. Linear weights use variance
/// `2 / (fan_in + fan_out)`, positional tables σ = 0.02, biases and the final
/// head layer start at zero, layer-norm gains at one.
pub fn init_weights<T: Real>(config: &EncoderConfig, seed: u64) -> Result<EncoderWeights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = IndexMap::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.starts_with("head.fc2") || name.ends_with(".b") {
            vec![0.0; n]
        } else if name.ends_with(".g") {
            vec![1.0; n]
        } else if name.starts_with("pos.") {
            let normal = Normal::new(0.0, 0.02).expect("valid sigma");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        } else {
            let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid sigma");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        let t = Tensor::new(shape, data.into_iter().map(real::<T>).collect())?;
        params.insert(name, t);
    }
    let mut w = EncoderWeights {
        config: config.clone(),
        params,
    };
    w.sync_pair_positions();
    Ok(w)
}

/// Parameters registered on a tape for one forward pass.
pub struct Bound<'t, T: Real> {
    config: EncoderConfig,
    vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn var(&self, name: &str) -> Var<'t, T> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var<'t, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn linear(&self, x: &Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
        x.matmul(&self.var(&format!("{prefix}.w")))?
            .add_row(&self.var(&format!("{prefix}.b")))
    }

    fn attention(&self, x: &Var<'t, T>, block: usize) -> Result<Var<'t, T>> {
        let p = format!("blocks.{block}.attn");
        let q = self.linear(x, &format!("{p}.q"))?;
        let k = self.linear(x, &format!("{p}.k"))?;
        let v = self.linear(x, &format!("{p}.v"))?;
        let dh = self.config.head_dim();
        let scale: T = real(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let qh = q.narrow(1, h * dh, dh)?;
            let kh = k.narrow(1, h * dh, dh)?;
            let vh = v.narrow(1, h * dh, dh)?;
            let attn = qh.matmul(&kh.transpose()?)?.scale(scale)?.softmax(1)?;
            heads.push(attn.matmul(&vh)?);
        }
        let merged = Var::concat(&heads, 1)?;
        self.linear(&merged, &format!("{p}.o"))
    }

    /// Token features `[tokens, D]` after the final layer norm.
    pub fn encode_tokens(&self, patches: &Var<'t, T>, pos: &str) -> Result<Var<'t, T>> {
        let mut x = self.linear(patches, "patch")?.add(&self.var(pos))?;
        for b in 0..self.config.depth {
            let pre = |s: &str| format!("blocks.{b}.{s}");
            let h = x.layernorm(&self.var(&pre("norm1.g")), &self.var(&pre("norm1.b")))?;
            x = x.add(&self.attention(&h, b)?)?;
            let h = x.layernorm(&self.var(&pre("norm2.g")), &self.var(&pre("norm2.b")))?;
            let h = self.linear(&h, &pre("mlp.fc1"))?.gelu()?;
            x = x.add(&self.linear(&h, &pre("mlp.fc2"))?)?;
        }
        x.layernorm(&self.var("norm.g"), &self.var("norm.b"))
    }

    /// Retrieval embedding `[D]` of one `[h, w, c]` image.
    pub fn embed(&self, image: &Tensor<T>) -> Result<Var<'t, T>> {
        check_image(&self.config, image, self.config.image_w)?;
        let tape = self.var("patch.w").tape();
        let patches = tape.constant(patchify(image, self.config.patch_size)?);
        let pooled = self.encode_tokens(&patches, "pos.single")?.mean_rows()?;
        if self.config.normalize_embeddings {
            pooled.l2_normalize()
        } else {
            Ok(pooled)
        }
    }

    /// Negative-pair probability `[1, 1]` for `(query, gallery)`.
    ///
    /// `dropout_seed` enables train-mode dropout in the head.
    pub fn score_pair(&self, query: &Tensor<T>, gallery: &Tensor<T>, dropout_seed: Option<u64>) -> Result<Var<'t, T>> {
        check_image(&self.config, query, self.config.image_w)?;
        check_image(&self.config, gallery, self.config.image_w)?;
        let tape = self.var("patch.w").tape();
        let wide = concat_width(query, gallery)?;
        let patches = tape.constant(patchify(&wide, self.config.patch_size)?);
        let pooled = self.encode_tokens(&patches, "pos.pair")?.mean_rows()?;
        let d = self.config.embed_dim;
        let mut hidden = self.linear(&pooled.reshape([1, d])?, "head.fc1")?.sigmoid()?;
        if let Some(seed) = dropout_seed {
            let p = self.config.head_dropout;
            if p > 0.0 {
                let mask = dropout_mask::<T>(self.config.head_hidden(), p, seed);
                hidden = hidden.mul(&tape.constant(mask))?;
            }
        }
        self.linear(&hidden, "head.fc2")?.sigmoid()
    }
}

/// Inverted-dropout mask `[1, n]`: zeros with probability `p`, otherwise
/// `1 / (1 - p)`.
pub fn dropout_mask<T: Real>(n: usize, p: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep: T = real(1.0 / (1.0 - p));
    Tensor::from_fn([1, n], |_| if rng.random::<f64>() < p { T::zero() } else { keep })
}

fn check_image<T: Real>(config: &EncoderConfig, image: &Tensor<T>, width: usize) -> Result<()> {
    if image.shape() != [config.image_h, width, config.channels] {
        return Err(Error::shape(format!(
            "image shape {:?} does not match configured [{}, {width}, {}]",
            image.shape(),
            config.image_h,
            config.channels
        )));
    }
    Ok(())
}

/// Splits an `[h, w, c]` image into row-major patches, each flattened
/// row-major, giving `[num_patches, patch² · c]`.
pub fn patchify<T: Real>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let [h, w, c] = image.shape()[..] else {
        return Err(Error::shape(format!("expected [h, w, c] image, got {:?}", image.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!("image {h}x{w} is not divisible by patch size {patch}")));
    }
    let (gr, gc) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gr * gc * pd);
    for pr in 0..gr {
        for pc in 0..gc {
            for y in 0..patch {
                let start = ((pr * patch + y) * w + pc * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new([gr * gc, pd], out)
}

/// Places two `[h, w, c]` images side by side: `[h, 2w, c]`.
pub fn concat_width<T: Real>(left: &Tensor<T>, right: &Tensor<T>) -> Result<Tensor<T>> {
    if left.shape() != right.shape() || left.rank() != 3 {
        return Err(Error::shape(format!(
            "cannot concatenate {:?} and {:?}",
            left.shape(),
            right.shape()
        )));
    }
    let [h, w, c] = left.shape()[..] else { unreachable!() };
    let mut out = Vec::with_capacity(2 * left.len());
    for y in 0..h {
        out.extend_from_slice(&left.data()[y * w * c..(y + 1) * w * c]);
        out.extend_from_slice(&right.data()[y * w * c..(y + 1) * w * c]);
    }
    Tensor::new([h, 2 * w, c], out)
}

/// Eval-mode embedding of one image.
pub fn encode<T: Real>(image: &Tensor<T>, weights: &EncoderWeights<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let bound = weights.bind_frozen(&tape);
    let out = bound.embed(image)?;
    let v = out.value().clone();
    Ok(v)
}

/// Negative-pair probability in `(0, 1)`. `train_mode` applies head dropout
/// drawn from `rng_seed`; eval mode ignores the seed.
pub fn score_pair<T: Real>(
    query: &Tensor<T>,
    gallery: &Tensor<T>,
    weights: &EncoderWeights<T>,
    train_mode: bool,
    rng_seed: u64,
) -> Result<T> {
    let tape = Tape::new();
    let bound = weights.bind_frozen(&tape);
    let p = bound.score_pair(query, gallery, train_mode.then_some(rng_seed))?;
    let v = p.value().item()?;
    Ok(v)
}

/// Embeds many images, in parallel when `exec` allows.
pub fn encode_batch(images: &[&Tensor<f32>], weights: &EncoderWeights<f32>, exec: Exec) -> Result<Vec<Tensor<f32>>> {
    par::try_map(exec, images, |img| encode(img, weights))
}
