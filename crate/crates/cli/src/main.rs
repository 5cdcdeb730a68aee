use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stir_core::data::{generate_synthetic, read_embeddings, write_embeddings, EmbeddingTable, Split, SyntheticSpec};
use stir_core::gradcheck;
use stir_core::par::Exec;
use stir_core::pipeline::{
    ablation_variants, embed, evaluate_variants, load_dataset, loss_log_csv, prepare, retrieve, run_pipeline,
    train_stir, train_triplet, untrained_weights, RunConfig,
};
use stir_core::vit::{checkpoint, EncoderWeights};
use stir_core::Error;

#[derive(Parser)]
#[command(name = "stir", version, about = "Triplet ViT retrieval with pairwise transformer reranking")]
struct Cli {
    /// Worker threads for the parallel phases (STIR_THREADS also bounds this)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run every phase on the calling thread
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set triplet.epochs=5` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Overrides `seed`
    #[arg(long)]
    seed: Option<u64>,

    /// Overrides `out_dir`
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest.jsonl + images.bin)
    SynthData {
        /// TOML synthetic spec; defaults apply when omitted
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoder with batch-hard triplet loss
    TrainTriplet(ConfigArgs),
    /// Train the pair model from a triplet checkpoint
    TrainStir {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Triplet checkpoint to initialize from
        #[arg(long, conflicts_with = "from_scratch")]
        init: Option<PathBuf>,
        /// Start from freshly initialized weights instead
        #[arg(long)]
        from_scratch: bool,
    },
    /// Embed dataset items with an encoder checkpoint
    Embed {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides `data.manifest`
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve with stored embeddings, optionally rerank, and report metrics
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        stir_checkpoint: Option<PathBuf>,
        /// Rerank depth; adds a reranked row next to the baseline
        #[arg(long)]
        rerank_n: Option<usize>,
        /// Also report the symmetric reranker
        #[arg(long, requires = "rerank_n")]
        symmetric: bool,
    },
    /// Report one reranked row per depth
    AblateN {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        stir_checkpoint: PathBuf,
        /// Comma-separated depths; defaults to `eval.ablate_n`
        #[arg(long, value_delimiter = ',')]
        n_values: Option<Vec<usize>>,
    },
    /// Finite-difference checks of every op and both losses
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Every stage end to end: train, retrieve, rerank, report
    Run(ConfigArgs),
}

/// Usage or configuration problems exit 1, data problems 2, numerical
/// failures 3.
fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        3
    } else if matches!(err, Error::Config(_)) {
        1
    } else {
        2
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    let text = match &args.config {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(dir) = &args.out_dir {
        overrides.push(format!("out_dir={}", toml_string(&dir.display().to_string())));
    }
    RunConfig::from_toml_with_overrides(&text, &overrides)
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, Error> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("effective_config.toml"), cfg.to_toml())?;
    Ok(&cfg.out_dir)
}

fn write_epoch_checkpoint(dir: &Path, stage: &str, epoch: usize, w: &EncoderWeights<f32>) -> Result<(), Error> {
    let dir = dir.join(format!("{stage}_epochs"));
    fs::create_dir_all(&dir)?;
    checkpoint::write(dir.join(format!("epoch_{epoch:03}.ckpt")), w)
}

fn load_matching(path: &Path, cfg: &RunConfig) -> Result<EncoderWeights<f32>, Error> {
    let w = checkpoint::read(path)?;
    if w.config() != &cfg.encoder {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different encoder config",
            path.display()
        )));
    }
    Ok(w)
}

fn print_written(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn cmd_synth(spec: Option<&Path>, out: &Path) -> Result<(), Error> {
    let spec: SyntheticSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => SyntheticSpec::default(),
    };
    let data = generate_synthetic(&spec)?;
    data.write(out)?;
    let train = data.manifest.by_split(Split::Train).count();
    let test = data.manifest.by_split(Split::Test).count();
    println!(
        "classes {} items {} (train {train}, test {test})",
        spec.num_classes,
        data.manifest.len()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train_triplet(cfg: &RunConfig) -> Result<(), Error> {
    let dir = out_dir(cfg)?;
    let prepared = prepare(cfg)?;
    let mut losses = Vec::new();
    let weights = train_triplet(cfg, &prepared.train, untrained_weights(cfg)?, &mut |e, l, w| {
        println!("epoch {e} loss {l:.6}");
        losses.push(l);
        write_epoch_checkpoint(dir, "triplet", e, w)
    })?;
    let (ckpt, log) = (dir.join("triplet.ckpt"), dir.join("triplet_loss.csv"));
    checkpoint::write(&ckpt, &weights)?;
    fs::write(&log, loss_log_csv(&losses))?;
    print_written(&[ckpt, log]);
    Ok(())
}

fn cmd_train_stir(cfg: &RunConfig, init: Option<&Path>, from_scratch: bool, exec: Exec) -> Result<(), Error> {
    let weights = match (init, from_scratch) {
        (Some(p), _) => load_matching(p, cfg)?,
        (None, true) => untrained_weights(cfg)?,
        (None, false) => {
            return Err(Error::Config(
                "train-stir needs --init <triplet checkpoint> (or --from-scratch)".into(),
            ))
        }
    };
    let dir = out_dir(cfg)?;
    let prepared = prepare(cfg)?;
    let mut losses = Vec::new();
    let weights = train_stir(cfg, &prepared.train, weights, exec, &mut |e, l, w| {
        println!("epoch {e} loss {l:.6}");
        losses.push(l);
        write_epoch_checkpoint(dir, "stir", e, w)
    })?;
    let (ckpt, log) = (dir.join("stir.ckpt"), dir.join("stir_loss.csv"));
    checkpoint::write(&ckpt, &weights)?;
    fs::write(&log, loss_log_csv(&losses))?;
    print_written(&[ckpt, log]);
    Ok(())
}

fn cmd_embed(cfg: &RunConfig, ckpt: &Path, split: SplitArg, out: &Path, exec: Exec) -> Result<(), Error> {
    let weights = load_matching(ckpt, cfg)?;
    let (manifest, all) = load_dataset(cfg)?;
    let ids: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| match split {
            SplitArg::Train => r.split == Split::Train,
            SplitArg::Test => r.split == Split::Test,
            SplitArg::All => true,
        })
        .map(|r| r.item_id)
        .collect();
    if ids.is_empty() {
        return Err(Error::Input("no manifest records in the requested split".into()));
    }
    let table = embed(&all.subset(&ids)?, &weights, exec)?;
    write_embeddings(out, &table)?;
    println!("embedded {} items, dim {}", table.len(), table.dim());
    print_written(&[out.to_path_buf()]);
    Ok(())
}

fn report_files(cfg: &RunConfig, stem: &str, report: &stir_core::report::Report) -> Result<(), Error> {
    let dir = out_dir(cfg)?;
    let (csv, txt) = (dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.txt")));
    fs::write(&csv, report.to_csv())?;
    fs::write(&txt, report.to_text())?;
    print!("{}", report.to_text());
    print_written(&[csv, txt]);
    Ok(())
}

fn load_embeddings(path: &Path) -> Result<EmbeddingTable, Error> {
    read_embeddings(path)
}

fn cmd_evaluate(
    cfg: &RunConfig,
    embeddings: &Path,
    stir: Option<&Path>,
    rerank_n: Option<usize>,
    symmetric: bool,
    exec: Exec,
) -> Result<(), Error> {
    let prepared = prepare(cfg)?;
    let retrieval = retrieve(cfg, &prepared, &load_embeddings(embeddings)?, exec)?;
    let variants: Vec<(usize, bool)> = match rerank_n {
        Some(n) if symmetric => vec![(n, false), (n, true)],
        Some(n) => vec![(n, false)],
        None => Vec::new(),
    };
    let weights = match (stir, rerank_n) {
        (Some(p), _) => Some(load_matching(p, cfg)?),
        (None, Some(_)) => return Err(Error::Config("--rerank-n needs --stir-checkpoint".into())),
        (None, None) => None,
    };
    let report = evaluate_variants(cfg, &prepared, &retrieval, weights.as_ref(), &variants, exec)?;
    report_files(cfg, "report", &report)
}

fn cmd_ablate(
    cfg: &RunConfig,
    embeddings: &Path,
    stir: &Path,
    n_values: Option<&[usize]>,
    exec: Exec,
) -> Result<(), Error> {
    let variants = match n_values {
        Some(ns) if ns.contains(&0) => return Err(Error::Config("rerank depths must be at least 1".into())),
        Some(ns) => ns.iter().map(|&n| (n, false)).collect(),
        None => ablation_variants(cfg),
    };
    let prepared = prepare(cfg)?;
    let retrieval = retrieve(cfg, &prepared, &load_embeddings(embeddings)?, exec)?;
    let weights = load_matching(stir, cfg)?;
    let report = evaluate_variants(cfg, &prepared, &retrieval, Some(&weights), &variants, exec)?;
    report_files(cfg, "ablation", &report)
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<(), Error> {
    let results = gradcheck::run_all(&cfg.encoder, cfg.seed)?;
    for r in &results {
        println!(
            "{:<16} max rel error {:.3e} (tolerance {:.0e}, {} coordinates) {}",
            r.suite,
            r.max_rel_error,
            r.tolerance,
            r.checked,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    gradcheck::ensure_passed(&results)
}

fn cmd_run(cfg: &RunConfig, exec: Exec) -> Result<(), Error> {
    let dir = out_dir(cfg)?;
    let out = run_pipeline(cfg, exec, Some(dir))?;
    print!("{}", out.report.to_text());
    println!("Ablation over n");
    print!("{}", out.ablation.to_text());
    println!("wrote {}", dir.display());
    Ok(())
}

fn thread_limit(flag: Option<usize>) -> Result<Option<usize>, Error> {
    let env = match std::env::var("STIR_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("STIR_THREADS must be a positive integer, got `{v}`")))?,
        ),
        Err(_) => None,
    };
    if flag == Some(0) {
        return Err(Error::Config("--threads must be positive".into()));
    }
    Ok(match (flag, env) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    })
}

fn setup_threads(limit: Option<usize>) -> Result<(), Error> {
    #[cfg(feature = "parallel")]
    if let Some(n) = limit {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = limit;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    setup_threads(thread_limit(cli.threads)?)?;
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::SynthData { spec, out } => cmd_synth(spec.as_deref(), &out),
        Command::TrainTriplet(args) => cmd_train_triplet(&load_config(&args)?),
        Command::TrainStir {
            cfg,
            init,
            from_scratch,
        } => cmd_train_stir(&load_config(&cfg)?, init.as_deref(), from_scratch, exec),
        Command::Embed {
            mut cfg,
            checkpoint,
            manifest,
            split,
            out,
        } => {
            if let Some(m) = manifest {
                cfg.overrides
                    .push(format!("data.manifest={}", toml_string(&m.display().to_string())));
            }
            cmd_embed(&load_config(&cfg)?, &checkpoint, split, &out, exec)
        }
        Command::Evaluate {
            cfg,
            embeddings,
            stir_checkpoint,
            rerank_n,
            symmetric,
        } => cmd_evaluate(
            &load_config(&cfg)?,
            &embeddings,
            stir_checkpoint.as_deref(),
            rerank_n,
            symmetric,
            exec,
        ),
        Command::AblateN {
            cfg,
            embeddings,
            stir_checkpoint,
            n_values,
        } => cmd_ablate(&load_config(&cfg)?, &embeddings, &stir_checkpoint, n_values.as_deref(), exec),
        Command::Gradcheck { cfg } => cmd_gradcheck(&load_config(&cfg)?),
        Command::Run(args) => cmd_run(&load_config(&args)?, exec),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
