//! Run configuration and the end-to-end pipeline: data, triplet training,
//! retrieval, pair-head training, reranked evaluation and reports.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, split_protocol, EmbeddingTable, LabeledDataset, Manifest, ProtocolSplit, RetrievalProtocol,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::index::{build_index, run_protocol, RankedList};
use crate::metrics::{evaluate, judgments_from_labels, MetricsReport, RelevanceJudgment};
use crate::mining::{derive_seed, train_stir_epoch, train_triplet_epoch, StirHyper, TripletHyper};
use crate::optim::AdamW;
use crate::par::Exec;
use crate::report::Report;
use crate::rerank::{rerank_all, RerankConfig, StirScorer};
use crate::tensor::{Metric, Tensor};
use crate::vit::{encode_batch, init_weights, EncoderConfig, EncoderWeights};
use crate::ItemId;

pub const BASELINE_ROW: &str = "ViT-Triplet";

pub fn stir_row(n: usize, symmetric: bool) -> String {
    if symmetric {
        format!("STIR-Symmetric, n={n}")
    } else {
        format!("STIR, n={n}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest of a prepared dataset; when absent the synthetic spec is
    /// generated in memory.
    pub manifest: Option<PathBuf>,
    /// Directory that manifest `source` fields are relative to. Defaults to
    /// the manifest's directory.
    pub root: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub protocol: RetrievalProtocol,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            root: None,
            synthetic: SyntheticSpec::default(),
            protocol: RetrievalProtocol::FixedSplit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metric: Metric,
    pub k_values: Vec<usize>,
    pub rerank_n: usize,
    pub symmetric: bool,
    pub ablate_n: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Cosine,
            k_values: vec![1, 5, 10],
            rerank_n: 5,
            symmetric: true,
            ablate_n: vec![1, 3, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub triplet: TripletHyper,
    pub stir: StirHyper,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/toy"),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            triplet: TripletHyper::default(),
            stir: StirHyper::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Parses `text` (possibly empty), then applies `key.path=value`
    /// overrides. Values are read as TOML literals; anything that does not
    /// parse as one is taken as a string.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{item}` is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut path: Vec<&str> = key.trim().split('.').collect();
            let last = path.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::config("empty override key"))?;
            let mut table = &mut root;
            for part in path {
                let entry = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::config(format!("override `{key}`: `{part}` is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        let cfg: Self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.triplet.validate()?;
        self.stir.validate()?;
        if self.data.manifest.is_none() {
            let s = &self.data.synthetic;
            s.validate()?;
            if [s.image_h, s.image_w, s.channels] != self.encoder.image_shape() {
                return Err(Error::config("synthetic image size differs from the encoder input size"));
            }
        }
        let e = &self.eval;
        if e.k_values.is_empty() || e.k_values.contains(&0) {
            return Err(Error::config("eval.k_values must be nonempty and positive"));
        }
        if e.rerank_n == 0 || e.ablate_n.contains(&0) {
            return Err(Error::config("rerank depths must be at least 1"));
        }
        Ok(())
    }

    fn stream(&self, purpose: u64) -> u64 {
        derive_seed(&[self.seed, purpose])
    }

    pub fn max_k(&self) -> usize {
        let ks = self.eval.k_values.iter().copied();
        ks.chain(self.eval.ablate_n.iter().copied())
            .chain([self.eval.rerank_n])
            .max()
            .unwrap_or(1)
    }
}

/// Datasets for one run: training items and the evaluation split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: ProtocolSplit,
    pub train: LabeledDataset,
    pub query: LabeledDataset,
    pub gallery: LabeledDataset,
    /// Every query and gallery item; resolves ids for the reranker.
    pub test: LabeledDataset,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<(Manifest, LabeledDataset)> {
    match &cfg.data.manifest {
        Some(path) => {
            let manifest = Manifest::read(path)?;
            let root = cfg
                .data
                .root
                .clone()
                .or_else(|| path.parent().map(Path::to_path_buf))
                .unwrap_or_default();
            let ds = LabeledDataset::load(&manifest, root)?;
            if let Some(img) = ds.images().first() {
                if img.shape() != cfg.encoder.image_shape() {
                    return Err(Error::input(format!(
                        "dataset images are {:?}, encoder expects {:?}",
                        img.shape(),
                        cfg.encoder.image_shape()
                    )));
                }
            }
            Ok((manifest, ds))
        }
        None => {
            let synth = generate_synthetic(&cfg.data.synthetic)?;
            let ds = synth.dataset()?;
            Ok((synth.manifest, ds))
        }
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (manifest, all) = load_dataset(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stream(1));
    let split = split_protocol(&manifest, cfg.data.protocol, &mut rng)?;
    let mut test_ids = split.query.clone();
    for id in &split.gallery {
        if !split.query.contains(id) {
            test_ids.push(*id);
        }
    }
    Ok(Prepared {
        train: all.subset(&split.train)?,
        query: all.subset(&split.query)?,
        gallery: all.subset(&split.gallery)?,
        test: all.subset(&test_ids)?,
        split,
    })
}

/// Called after each epoch with `(epoch, mean_loss, weights)`.
pub type EpochHook<'a> = dyn FnMut(usize, f64, &EncoderWeights<f32>) -> Result<()> + 'a;

pub fn untrained_weights(cfg: &RunConfig) -> Result<EncoderWeights<f32>> {
    init_weights(&cfg.encoder, cfg.stream(2))
}

fn check_loss(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite("epoch loss"))
    }
}

pub fn train_triplet(
    cfg: &RunConfig,
    train: &LabeledDataset,
    mut weights: EncoderWeights<f32>,
    hook: &mut EpochHook<'_>,
) -> Result<EncoderWeights<f32>> {
    let mut opt = AdamW::new(cfg.triplet.optimizer.clone());
    let seed = cfg.stream(3);
    for epoch in 0..cfg.triplet.epochs {
        let loss = check_loss(train_triplet_epoch(train, &mut weights, &mut opt, &cfg.triplet, seed, epoch)?)?;
        hook(epoch, loss, &weights)?;
    }
    Ok(weights)
}

/// Trains the pair model starting from `init` (normally the triplet
/// checkpoint). Pair positions are re-derived from the single-image table
/// before training starts.
pub fn train_stir(
    cfg: &RunConfig,
    train: &LabeledDataset,
    init: EncoderWeights<f32>,
    exec: Exec,
    hook: &mut EpochHook<'_>,
) -> Result<EncoderWeights<f32>> {
    let mut weights = init;
    weights.sync_pair_positions();
    let mut opt = AdamW::new(cfg.stir.optimizer.clone());
    let seed = cfg.stream(4);
    for epoch in 0..cfg.stir.epochs {
        let loss = check_loss(train_stir_epoch(train, &mut weights, &mut opt, &cfg.stir, seed, epoch, exec)?)?;
        hook(epoch, loss, &weights)?;
    }
    Ok(weights)
}

pub fn embed(ds: &LabeledDataset, weights: &EncoderWeights<f32>, exec: Exec) -> Result<EmbeddingTable> {
    let refs: Vec<&Tensor<f32>> = ds.images().iter().collect();
    let rows = encode_batch(&refs, weights, exec)?;
    EmbeddingTable::from_rows(ds.ids().to_vec(), &rows)
}

/// Picks the rows of `table` for `ids`, in that order.
pub fn select_rows(table: &EmbeddingTable, ids: &[ItemId]) -> Result<EmbeddingTable> {
    let pos: std::collections::HashMap<ItemId, usize> = table.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let d = table.dim();
    let mut data = Vec::with_capacity(ids.len() * d);
    for id in ids {
        let &i = pos.get(id).ok_or(Error::Resolution(id.0))?;
        data.extend_from_slice(table.row(i));
    }
    EmbeddingTable::new(ids.to_vec(), Tensor::new([ids.len(), d], data)?)
}

/// Baseline retrieval over the prepared split.
pub struct Retrieval {
    pub lists: Vec<RankedList>,
    pub judgments: Vec<RelevanceJudgment>,
}

pub fn retrieve(cfg: &RunConfig, prepared: &Prepared, embeddings: &EmbeddingTable, exec: Exec) -> Result<Retrieval> {
    let q = select_rows(embeddings, prepared.query.ids())?;
    let g = select_rows(embeddings, prepared.gallery.ids())?;
    let index = build_index(&g, prepared.gallery.labels().to_vec(), cfg.eval.metric)?;
    let k = cfg.max_k();
    let k = match cfg.data.protocol {
        RetrievalProtocol::FixedSplit => k.min(index.len()),
        RetrievalProtocol::LeaveOneOut => k,
    };
    let lists = run_protocol(&q, &index, cfg.data.protocol, k, exec)?;
    let pairs = |ds: &LabeledDataset| ds.ids().iter().copied().zip(ds.labels().iter().copied()).collect::<Vec<_>>();
    let judgments = judgments_from_labels(&pairs(&prepared.query), &pairs(&prepared.gallery))?;
    Ok(Retrieval { lists, judgments })
}

fn metrics_of(cfg: &RunConfig, lists: &[RankedList], r: &Retrieval, exec: Exec) -> Result<MetricsReport> {
    evaluate(lists, &r.judgments, &cfg.eval.k_values, exec)
}

/// Rows: baseline, then for each `(n, symmetric)` a reranked variant.
pub fn evaluate_variants(
    cfg: &RunConfig,
    prepared: &Prepared,
    retrieval: &Retrieval,
    stir: Option<&EncoderWeights<f32>>,
    variants: &[(usize, bool)],
    exec: Exec,
) -> Result<Report> {
    let mut report = Report::default();
    report.push(BASELINE_ROW, metrics_of(cfg, &retrieval.lists, retrieval, exec)?);
    if variants.is_empty() {
        return Ok(report);
    }
    let weights = stir.ok_or_else(|| Error::config("reranking requested without a pair-model checkpoint"))?;
    let scorer = StirScorer::new(weights.clone());
    for &(n, symmetric) in variants {
        let rc = RerankConfig { n, symmetric };
        let lists = rerank_all(&retrieval.lists, &scorer, &rc, &prepared.test, exec)?;
        report.push(stir_row(n, symmetric), metrics_of(cfg, &lists, retrieval, exec)?);
    }
    Ok(report)
}

pub fn main_variants(cfg: &RunConfig) -> Vec<(usize, bool)> {
    let mut v = vec![(cfg.eval.rerank_n, false)];
    if cfg.eval.symmetric {
        v.push((cfg.eval.rerank_n, true));
    }
    v
}

pub fn ablation_variants(cfg: &RunConfig) -> Vec<(usize, bool)> {
    cfg.eval.ablate_n.iter().map(|&n| (n, false)).collect()
}

pub fn loss_log_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (e, l) in losses.iter().enumerate() {
        out.push_str(&format!("{e},{l:.9}\n"));
    }
    out
}

/// Everything the full pipeline produces.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    /// Baseline metrics with untrained weights.
    pub untrained: MetricsReport,
    pub triplet_losses: Vec<f64>,
    pub stir_losses: Vec<f64>,
    /// Baseline, STIR and (optionally) STIR-Symmetric rows.
    pub report: Report,
    /// Baseline plus one STIR row per ablation depth.
    pub ablation: Report,
}

impl PipelineOutcome {
    /// Concatenated text of both reports.
    pub fn report_text(&self) -> String {
        format!(
            "{}\nAblation over n\n{}{}\n{}",
            self.report.to_text(),
            self.ablation.to_text(),
            self.report.to_csv(),
            self.ablation.to_csv()
        )
    }
}

/// Runs every stage. When `out_dir` is given, writes checkpoints, loss
/// logs, embeddings, reports and the effective config there.
pub fn run_pipeline(cfg: &RunConfig, exec: Exec, out_dir: Option<&Path>) -> Result<PipelineOutcome> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("effective_config.toml"), cfg.to_toml())?;
    }
    let prepared = prepare(cfg)?;
    let init = untrained_weights(cfg)?;
    let untrained = {
        let emb = embed(&prepared.test, &init, exec)?;
        let r = retrieve(cfg, &prepared, &emb, exec)?;
        metrics_of(cfg, &r.lists, &r, exec)?
    };

    let mut triplet_losses = Vec::new();
    let triplet = train_triplet(cfg, &prepared.train, init, &mut |_, l, _| {
        triplet_losses.push(l);
        Ok(())
    })?;
    let emb = embed(&prepared.test, &triplet, exec)?;
    let retrieval = retrieve(cfg, &prepared, &emb, exec)?;

    let mut stir_losses = Vec::new();
    let stir = train_stir(cfg, &prepared.train, triplet.clone(), exec, &mut |_, l, _| {
        stir_losses.push(l);
        Ok(())
    })?;
    let report = evaluate_variants(cfg, &prepared, &retrieval, Some(&stir), &main_variants(cfg), exec)?;
    let ablation = evaluate_variants(cfg, &prepared, &retrieval, Some(&stir), &ablation_variants(cfg), exec)?;

    if let Some(dir) = out_dir {
        crate::vit::checkpoint::write(dir.join("triplet.ckpt"), &triplet)?;
        crate::vit::checkpoint::write(dir.join("stir.ckpt"), &stir)?;
        fs::write(dir.join("triplet_loss.csv"), loss_log_csv(&triplet_losses))?;
        fs::write(dir.join("stir_loss.csv"), loss_log_csv(&stir_losses))?;
        crate::data::write_embeddings(dir.join("test_embeddings.bin"), &emb)?;
        fs::write(dir.join("report.csv"), report.to_csv())?;
        fs::write(dir.join("report.txt"), report.to_text())?;
        fs::write(dir.join("ablation.csv"), ablation.to_csv())?;
        fs::write(dir.join("ablation.txt"), ablation.to_text())?;
    }
    Ok(PipelineOutcome {
        untrained,
        triplet_losses,
        stir_losses,
        report,
        ablation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[triplet]\nmargin = -1.0").is_err());
        assert!(RunConfig::from_toml("[eval]\nk_values = []").is_err());
        let ok = RunConfig::from_toml("seed = 3\n[eval]\nk_values = [1, 2]").unwrap();
        assert_eq!(ok.seed, 3);
        assert_eq!(ok.eval.k_values, vec![1, 2]);
    }

    #[test]
    fn missing_manifest_is_a_data_error() {
        let cfg = RunConfig::from_toml("[data]\nmanifest = \"/nonexistent/m.jsonl\"").unwrap();
        assert!(matches!(load_dataset(&cfg), Err(Error::Io(_))));
    }

    #[test]
    fn overrides_replace_and_create_keys() {
        let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let cfg = RunConfig::from_toml_with_overrides(
            "seed = 3\n[triplet]\nepochs = 4\n",
            &set(&["triplet.epochs=7", "eval.metric=euclidean", "out_dir=runs/x", "stir.head_lr=0.5"]),
        )
        .unwrap();
        assert_eq!((cfg.seed, cfg.triplet.epochs), (3, 7));
        assert_eq!(cfg.eval.metric, Metric::Euclidean);
        assert_eq!(cfg.out_dir, PathBuf::from("runs/x"));
        assert_eq!(cfg.stir.head_lr, 0.5);
        assert!(RunConfig::from_toml_with_overrides("", &set(&["triplet.nope=1"])).is_err());
        assert!(RunConfig::from_toml_with_overrides("", &set(&["seed"])).is_err());
        assert!(RunConfig::from_toml_with_overrides("", &set(&["seed.x=1"])).is_err());
    }

    #[test]
    fn prepared_split_is_consistent() {
        let cfg = RunConfig::default();
        let p = prepare(&cfg).unwrap();
        assert_eq!(p.train.len(), 16 * 6);
        assert_eq!(p.query.len() + p.gallery.len(), 16 * 6);
        assert_eq!(p.test.len(), 16 * 6);
    }
}
