//! Finite-difference gradient suites in `f64`.
//!
//! Three suites: every differentiable tape op on random inputs, the encoder
//! under the batch-hard triplet loss, and the pair model under BCE. The two
//! model suites check every parameter coordinate of a micro encoder, plus
//! a sample of coordinates of the configured encoder. Mined triplets and
//! pairs are fixed before differencing, and dropout is off.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mining::{distance_matrix, mine_hard_pairs, mine_hard_triplets, triplet_batch_loss, LabeledPair, Margin, Triplet};
use crate::tensor::check::finite_diff_grad;
use crate::tensor::{Metric, Tape, Tensor, Var};
use crate::vit::{init_weights, Bound, EncoderConfig, EncoderWeights};
use crate::Label;

/// Per-op tolerance on the maximum relative error.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the full model suites.
pub const MODEL_TOLERANCE: f64 = 1e-3;

const OP_EPS: f64 = 1e-4;
const MODEL_EPS: f64 = 1e-5;
/// Denominator floor for relative errors of near-zero gradients.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Number of gradient coordinates compared.
    pub checked: usize,
    /// Where the maximum occurred.
    pub worst: String,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Default)]
struct Tracker {
    max: f64,
    checked: usize,
    worst: String,
}

impl Tracker {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = if analytic.is_finite() && numeric.is_finite() {
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
        } else {
            f64::INFINITY
        };
        self.checked += 1;
        if err > self.max || self.worst.is_empty() {
            self.max = err;
            self.worst = what();
        }
    }

    fn finish(self, suite: &str, tolerance: f64) -> SuiteResult {
        SuiteResult {
            suite: suite.to_string(),
            max_rel_error: self.max,
            tolerance,
            checked: self.checked,
            worst: self.worst,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[0.1, 2]` and random sign, away from kinks.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.random_range(0.1..2.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

type Build = for<'t> fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>;

struct OpCase {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    build: Build,
}

const BCE_TARGETS: [f64; 6] = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0];

fn op_cases() -> Vec<OpCase> {
    fn n(r: &mut ChaCha8Rng, s: &[usize]) -> Tensor<f64> {
        uniform(r, s, -2.0, 2.0)
    }
    vec![
        OpCase { name: "matmul", inputs: |r| vec![n(r, &[4, 5]), n(r, &[5, 3])], build: |v| v[0].matmul(&v[1]) },
        OpCase { name: "add", inputs: |r| vec![n(r, &[3, 4]), n(r, &[3, 4])], build: |v| v[0].add(&v[1]) },
        OpCase { name: "sub", inputs: |r| vec![n(r, &[3, 4]), n(r, &[3, 4])], build: |v| v[0].sub(&v[1]) },
        OpCase { name: "mul", inputs: |r| vec![n(r, &[3, 4]), n(r, &[3, 4])], build: |v| v[0].mul(&v[1]) },
        OpCase { name: "add_row", inputs: |r| vec![n(r, &[3, 4]), n(r, &[4])], build: |v| v[0].add_row(&v[1]) },
        OpCase { name: "scale", inputs: |r| vec![n(r, &[3, 4])], build: |v| v[0].scale(-1.7) },
        OpCase { name: "add_scalar", inputs: |r| vec![n(r, &[3, 4])], build: |v| v[0].add_scalar(0.3) },
        OpCase { name: "transpose", inputs: |r| vec![n(r, &[3, 5])], build: |v| v[0].transpose() },
        OpCase { name: "reshape", inputs: |r| vec![n(r, &[2, 6])], build: |v| v[0].reshape([3, 4]) },
        OpCase { name: "narrow", inputs: |r| vec![n(r, &[3, 6])], build: |v| v[0].narrow(1, 2, 3) },
        OpCase {
            name: "concat0",
            inputs: |r| vec![n(r, &[2, 3]), n(r, &[4, 3])],
            build: |v| Var::concat(&v[..2], 0),
        },
        OpCase {
            name: "concat1",
            inputs: |r| vec![n(r, &[2, 3]), n(r, &[2, 5])],
            build: |v| Var::concat(&v[..2], 1),
        },
        OpCase { name: "softmax0", inputs: |r| vec![n(r, &[3, 4])], build: |v| v[0].softmax(0) },
        OpCase { name: "softmax1", inputs: |r| vec![n(r, &[3, 4])], build: |v| v[0].softmax(1) },
        OpCase {
            name: "layernorm",
            inputs: |r| vec![n(r, &[3, 8]), uniform(r, &[8], 0.5, 1.5), n(r, &[8])],
            build: |v| v[0].layernorm(&v[1], &v[2]),
        },
        OpCase { name: "gelu", inputs: |r| vec![n(r, &[3, 4])], build: |v| v[0].gelu() },
        OpCase { name: "relu", inputs: |r| vec![off_zero(r, &[3, 4])], build: |v| v[0].relu() },
        OpCase { name: "sigmoid", inputs: |r| vec![n(r, &[3, 4])], build: |v| v[0].sigmoid() },
        OpCase { name: "sum", inputs: |r| vec![n(r, &[3, 4])], build: |v| v[0].sum() },
        OpCase { name: "mean", inputs: |r| vec![n(r, &[3, 4])], build: |v| v[0].mean() },
        OpCase { name: "mean_rows", inputs: |r| vec![n(r, &[5, 4])], build: |v| v[0].mean_rows() },
        OpCase { name: "l2_normalize", inputs: |r| vec![off_zero(r, &[3, 4])], build: |v| v[0].l2_normalize() },
        OpCase {
            name: "pairwise_cosine",
            inputs: |r| vec![off_zero(r, &[5, 4])],
            build: |v| v[0].pairwise_distances(Metric::Cosine),
        },
        OpCase {
            name: "pairwise_euclidean",
            inputs: |r| vec![n(r, &[5, 4])],
            build: |v| v[0].pairwise_distances(Metric::Euclidean),
        },
        OpCase {
            name: "gather",
            inputs: |r| vec![n(r, &[2, 3])],
            build: |v| v[0].gather(&[4, 0, 4, 2, 5]),
        },
        OpCase {
            name: "bce",
            inputs: |r| vec![uniform(r, &[6], 0.15, 0.85)],
            build: |v| v[0].bce(&BCE_TARGETS),
        },
    ]
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output element matters.
fn weighted_output(case: &OpCase, xs: &[Tensor<f64>], w: &Tensor<f64>) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = (case.build)(&vars)?;
    let v = out.value();
    Ok(v.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
}

fn check_op(case: &OpCase, rng: &mut ChaCha8Rng, tracker: &mut Tracker) -> Result<()> {
    let xs = (case.inputs)(rng);
    let tape = Tape::new();
    let vars: Vec<_> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = (case.build)(&vars)?;
    let w = uniform(rng, &out.shape(), -1.0, 1.0);
    let loss = out.mul(&tape.constant(w.clone()))?.sum()?;
    let grads = tape.backward(&loss)?;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        let mut probe = xs.clone();
        let numeric = finite_diff_grad(
            |t| {
                probe[i] = t.clone();
                weighted_output(case, &probe, &w).unwrap_or(f64::NAN)
            },
            &xs[i],
            OP_EPS,
        );
        for (j, (&a, &b)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            tracker.record(|| format!("{} input {i} element {j}", case.name), a, b);
        }
    }
    Ok(())
}

/// Every differentiable op, `trials` random draws each.
pub fn op_suite(seed: u64, trials: usize) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tracker = Tracker::default();
    for case in op_cases() {
        for _ in 0..trials {
            check_op(&case, &mut rng, &mut tracker)?;
        }
    }
    Ok(tracker.finish("ops", OP_TOLERANCE))
}

/// Smallest encoder that still exercises every layer type.
pub fn micro_config() -> EncoderConfig {
    EncoderConfig {
        image_h: 8,
        image_w: 8,
        channels: 1,
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        depth: 1,
        ..Default::default()
    }
}

/// Which coordinates of each parameter to difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    All,
    /// Up to this many random coordinates per parameter tensor.
    Sample(usize),
}

/// Random weights with nonzero head and perturbed gains, biases and pair
/// positions, so no gradient is trivially zero by symmetry.
fn generic_weights(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<EncoderWeights<f64>> {
    let mut w = init_weights::<f64>(config, rng.random())?;
    let noise = Normal::new(0.0, 0.1).expect("valid sigma");
    for (_, t) in w.iter_mut() {
        for v in t.data_mut() {
            *v += noise.sample(rng);
        }
    }
    Ok(w)
}

fn batch(config: &EncoderConfig, labels: &[Label], rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    labels
        .iter()
        .map(|_| uniform(rng, &config.image_shape(), -1.0, 1.0))
        .collect()
}

fn embeddings<'t>(bound: &Bound<'t, f64>, images: &[Tensor<f64>]) -> Result<Var<'t, f64>> {
    let d = bound.config().embed_dim;
    let rows = images
        .iter()
        .map(|img| bound.embed(img)?.reshape([1, d]))
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&rows, 0)
}

trait ModelLoss {
    fn eval<'t>(&self, b: &Bound<'t, f64>) -> Result<Var<'t, f64>>;
}

struct TripletLoss {
    images: Vec<Tensor<f64>>,
    triplets: Vec<Triplet>,
    margin: Margin,
}

impl ModelLoss for TripletLoss {
    fn eval<'t>(&self, b: &Bound<'t, f64>) -> Result<Var<'t, f64>> {
        let dist = embeddings(b, &self.images)?.pairwise_distances(Metric::Cosine)?;
        triplet_batch_loss(&dist, &self.triplets, self.margin)
    }
}

struct PairLoss {
    images: Vec<Tensor<f64>>,
    pairs: Vec<LabeledPair>,
}

impl ModelLoss for PairLoss {
    fn eval<'t>(&self, b: &Bound<'t, f64>) -> Result<Var<'t, f64>> {
        let probs = self
            .pairs
            .iter()
            .map(|p| b.score_pair(&self.images[p.a], &self.images[p.b], None))
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<f64> = self.pairs.iter().map(|p| if p.is_negative { 1.0 } else { 0.0 }).collect();
        Var::concat(&probs, 0)?.bce(&targets)
    }
}

fn check_params(
    weights: &EncoderWeights<f64>,
    loss: &dyn ModelLoss,
    used: &dyn Fn(&str) -> bool,
    coverage: Coverage,
    rng: &mut ChaCha8Rng,
    tracker: &mut Tracker,
) -> Result<()> {
    let tape = Tape::new();
    let bound = weights.bind(&tape, |_| true);
    let l = loss.eval(&bound)?;
    let grads = tape.backward(&l)?;
    let eval = |w: &EncoderWeights<f64>| -> Result<f64> {
        let tape = Tape::new();
        let out = loss.eval(&w.bind_frozen(&tape))?.value().item()?;
        Ok(out)
    };
    let mut probe = weights.clone();
    for (name, var) in bound.vars() {
        if !used(name) {
            continue;
        }
        let analytic = grads.wrt(var);
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..analytic.len()).collect(),
            Coverage::Sample(k) => (0..k.min(analytic.len())).map(|_| rng.random_range(0..analytic.len())).collect(),
        };
        for i in coords {
            let orig = weights.get(name).expect("bound name").data()[i];
            let mut at = |v: f64| -> Result<f64> {
                probe.get_mut(name).expect("bound name").data_mut()[i] = v;
                eval(&probe)
            };
            let up = at(orig + MODEL_EPS)?;
            let down = at(orig - MODEL_EPS)?;
            at(orig)?;
            let numeric = (up - down) / (2.0 * MODEL_EPS);
            tracker.record(|| format!("{name}[{i}]"), analytic.data()[i], numeric);
        }
    }
    Ok(())
}

fn triplet_case(config: &EncoderConfig, coverage: Coverage, rng: &mut ChaCha8Rng, tracker: &mut Tracker) -> Result<()> {
    let weights = generic_weights(config, rng)?;
    let labels: Vec<Label> = vec![0, 0, 1, 1, 2, 2];
    let images = batch(config, &labels, rng);
    let (triplets, margin) = {
        let tape = Tape::new();
        let emb = embeddings(&weights.bind_frozen(&tape), &images)?;
        let dist = distance_matrix(&emb.value(), Metric::Cosine)?;
        let triplets = mine_hard_triplets(&dist, &labels)?;
        let n = labels.len();
        // margin large enough that every hinge is active, away from the kink
        let worst = triplets
            .iter()
            .map(|t| dist.data()[t.anchor * n + t.negative] - dist.data()[t.anchor * n + t.positive])
            .fold(0.0, f64::max);
        (triplets, Margin::new(worst + 0.5)?)
    };
    let loss = TripletLoss { images, triplets, margin };
    // the single-image path never touches the pair table or the head
    let used = |name: &str| name != "pos.pair" && !name.starts_with("head.");
    check_params(&weights, &loss, &used, coverage, rng, tracker)
}

fn pair_case(config: &EncoderConfig, coverage: Coverage, rng: &mut ChaCha8Rng, tracker: &mut Tracker) -> Result<()> {
    let weights = generic_weights(config, rng)?;
    let labels: Vec<Label> = vec![0, 0, 1, 1, 2, 2];
    let images = batch(config, &labels, rng);
    let pairs = {
        let tape = Tape::new();
        let emb = embeddings(&weights.bind_frozen(&tape), &images)?;
        let dist = distance_matrix(&emb.value(), Metric::Cosine)?;
        mine_hard_pairs(&dist, &labels, 2)?.pairs
    };
    let loss = PairLoss { images, pairs };
    let used = |name: &str| name != "pos.single";
    check_params(&weights, &loss, &used, coverage, rng, tracker)
}

type Case = fn(&EncoderConfig, Coverage, &mut ChaCha8Rng, &mut Tracker) -> Result<()>;

fn model_suite(name: &str, case: Case, config: &EncoderConfig, sample: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tracker = Tracker::default();
    case(&micro_config(), Coverage::All, &mut rng, &mut tracker)?;
    if sample > 0 {
        case(config, Coverage::Sample(sample), &mut rng, &mut tracker)?;
    }
    Ok(tracker.finish(name, MODEL_TOLERANCE))
}

/// Encoder + batch-hard triplet loss: every coordinate of the micro
/// encoder, then `sample` coordinates per tensor of `config`.
pub fn triplet_suite(config: &EncoderConfig, sample: usize, seed: u64) -> Result<SuiteResult> {
    model_suite("encoder+triplet", triplet_case, config, sample, seed)
}

/// Pair model + BCE over mined hard pairs, same coverage as
/// [`triplet_suite`].
pub fn pair_suite(config: &EncoderConfig, sample: usize, seed: u64) -> Result<SuiteResult> {
    model_suite("pair+bce", pair_case, config, sample, seed)
}

/// Trials per op in [`run_all`].
pub const OP_TRIALS: usize = 100;
/// Sampled coordinates per tensor of the configured encoder in [`run_all`].
pub const SAMPLED_COORDS: usize = 4;

pub fn run_all(config: &EncoderConfig, seed: u64) -> Result<Vec<SuiteResult>> {
    config.validate()?;
    Ok(vec![
        op_suite(seed, OP_TRIALS)?,
        triplet_suite(config, SAMPLED_COORDS, seed.wrapping_add(1))?,
        pair_suite(config, SAMPLED_COORDS, seed.wrapping_add(2))?,
    ])
}

/// Errors with the first failing suite, if any.
pub fn ensure_passed(results: &[SuiteResult]) -> Result<()> {
    match results.iter().find(|r| !r.passed()) {
        Some(r) => Err(Error::GradientCheck(format!(
            "suite {}: max relative error {:.3e} at {} (tolerance {:.0e})",
            r.suite, r.max_rel_error, r.worst, r.tolerance
        ))),
        None => Ok(()),
    }
}
