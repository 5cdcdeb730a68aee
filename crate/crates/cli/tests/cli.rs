use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data.synthetic]
num_classes = 4
items_per_class = 6
test_items_per_class = 3
image_h = 8
image_w = 8

[encoder]
image_h = 8
image_w = 8
patch_size = 4
embed_dim = 8
num_heads = 2
depth = 1

[triplet]
num_labels = 2
instances_per_label = 2
epochs = 2

[stir]
num_labels = 2
instances_per_label = 2
epochs = 2
head_only_epochs = 1

[eval]
k_values = [1, 3]
rerank_n = 3
ablate_n = [1, 3]
"#;

fn stir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stir"))
        .args(args)
        .env_remove("STIR_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&stir(&["--help"])), 0);
    assert_eq!(code(&stir(&["--version"])), 0);
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(code(&stir(&["no-such-command"])), 1);
    assert_eq!(code(&stir(&["run", "--set", "encoder.embed_dim=0"])), 1);
    assert_eq!(code(&stir(&["run", "--set", "no_equals_sign"])), 1);
    assert_eq!(code(&stir(&["run", "--config", "/nonexistent/config.toml"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = stir(&["train-stir", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = stir(&[
        "train-triplet",
        "--config",
        s(&cfg),
        "--out-dir",
        s(dir.path()),
        "--set",
        "data.manifest=\"/nonexistent/manifest.jsonl\"",
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_data_writes_manifest_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = stir(&["synth-data", "--out", s(&dir.path().join("data"))]);
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("data/manifest.jsonl").is_file());
    assert!(dir.path().join("data/images.bin").is_file());
    let lines = fs::read_to_string(dir.path().join("data/manifest.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 16 * 12);
}

#[test]
fn staged_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let common = ["--config", s(&cfg), "--out-dir", s(&out_dir)];
    let run = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend(common);
        args.extend(extra);
        let out = stir(&args);
        assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };

    run("train-triplet", &[]);
    for f in ["triplet.ckpt", "triplet_loss.csv", "effective_config.toml", "triplet_epochs/epoch_001.ckpt"] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
    let triplet = out_dir.join("triplet.ckpt");
    run("train-stir", &["--init", s(&triplet)]);
    assert!(out_dir.join("stir.ckpt").is_file());

    let emb = out_dir.join("test.emb");
    let stdout = run("embed", &["--checkpoint", s(&triplet), "--out", s(&emb)]);
    assert!(stdout.contains("embedded 12 items, dim 8"), "{stdout}");

    let stir_ckpt = out_dir.join("stir.ckpt");
    let stdout = run(
        "evaluate",
        &["--embeddings", s(&emb), "--stir-checkpoint", s(&stir_ckpt), "--rerank-n", "3", "--symmetric"],
    );
    assert!(stdout.contains("STIR-Symmetric, n=3"), "{stdout}");
    let csv = fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert!(csv.contains("STIR, n=3"));
    assert!(out_dir.join("report.txt").is_file());

    let stdout = run("ablate-n", &["--embeddings", s(&emb), "--stir-checkpoint", s(&stir_ckpt), "--n-values", "1,2"]);
    assert!(stdout.contains("STIR, n=2"), "{stdout}");
    assert!(out_dir.join("ablation.csv").is_file());

    let effective = fs::read_to_string(out_dir.join("effective_config.toml")).unwrap();
    assert!(effective.contains("seed = 3"));
}

#[test]
fn mismatched_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let base = ["--config", s(&cfg), "--out-dir", s(&out_dir)];
    let mut args = vec!["train-triplet"];
    args.extend(base);
    assert_eq!(code(&stir(&args)), 0);
    let ckpt = out_dir.join("triplet.ckpt");
    let mut args = vec!["train-stir"];
    args.extend(base);
    args.extend(["--init", s(&ckpt), "--set", "encoder.embed_dim=16"]);
    assert_eq!(code(&stir(&args)), 1);
}

#[test]
fn run_is_deterministic_across_thread_settings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let go = |name: &str, extra: &[&str]| {
        let out_dir = dir.path().join(name);
        let mut args = vec!["run", "--config", s(&cfg), "--out-dir", s(&out_dir)];
        args.extend(extra);
        let out = stir(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        fs::read_to_string(out_dir.join("report.csv")).unwrap()
    };
    let seq = go("seq", &["--sequential"]);
    let par = go("par", &["--threads", "2"]);
    assert_eq!(seq, par);
}

#[test]
fn gradcheck_passes_on_a_small_encoder() {
    let out = stir(&[
        "gradcheck",
        "--set",
        "encoder.image_h=8",
        "--set",
        "encoder.image_w=8",
        "--set",
        "encoder.patch_size=4",
        "--set",
        "encoder.embed_dim=8",
        "--set",
        "encoder.num_heads=2",
        "--set",
        "encoder.depth=1",
        "--set",
        "data.synthetic.image_h=8",
        "--set",
        "data.synthetic.image_w=8",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout.matches("PASS").count(), 3, "{stdout}");
}
