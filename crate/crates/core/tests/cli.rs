use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lmft::cli::{manifest_path, Manifest};

const CONFIG: &str = r#"
seed = 3

[tokenizer]
target_size = 120

[model]
embedding_dim = 8
hidden_dim = 12

[pretrain]
epochs = 2
batch_size = 4
bptt_len = 12
lr = 0.01

[finetune]
epochs = 1
batch_size = 4
bptt_len = 12

[classifier]
epochs = 2
batch_size = 8
"#;

fn toy(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy").join(name)
}

/// A working directory holding a small corpus, the config and the overfit set.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fs::read_to_string(toy("corpus.txt")).unwrap();
    let head: Vec<&str> = corpus.lines().take(120).collect();
    fs::write(dir.path().join("corpus.txt"), head.join("\n")).unwrap();
    fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    fs::copy(toy("clf_overfit.jsonl"), dir.path().join("clf.jsonl")).unwrap();
    dir
}

fn lmft(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmft"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = lmft(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn pipeline(dir: &Path, seed: &str) {
    let common = ["--config", "config.toml", "--seed", seed];
    let run = |args: &[&str]| ok(dir, &[args, &common[..]].concat());
    run(&["tok-train", "--corpus", "corpus.txt", "--out", "vocab.bin"]);
    run(&["lm-pretrain", "--corpus", "corpus.txt", "--vocab", "vocab.bin", "--out", "pre.ckpt"]);
    run(&["lm-finetune", "--data", "clf.jsonl", "--ckpt", "pre.ckpt", "--vocab", "vocab.bin", "--out", "ft.ckpt"]);
    run(&["clf-train", "--task", "binary", "--data", "clf.jsonl", "--ckpt", "ft.ckpt", "--out", "clf.ckpt"]);
    run(&["predict", "--ckpt", "clf.ckpt", "--input", "clf.jsonl", "--out", "preds.jsonl"]);
    run(&["evaluate", "--ckpt", "clf.ckpt", "--data", "clf.jsonl", "--metric", "mean-f1", "--out", "report.json"]);
}

fn manifest(dir: &Path, out: &str) -> Manifest {
    let text = fs::read_to_string(manifest_path(&dir.join(out))).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Manifest content that must not depend on wall-clock time.
fn stable(mut m: Manifest) -> Manifest {
    m.timings.clear();
    if let Some(run) = &mut m.run {
        run.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
    }
    m
}

const OUTPUTS: [&str; 6] = ["vocab.bin", "pre.ckpt", "ft.ckpt", "clf.ckpt", "preds.jsonl", "report.json"];

#[test]
fn same_seed_reproduces_every_artifact() {
    let (a, b) = (workspace(), workspace());
    pipeline(a.path(), "5");
    pipeline(b.path(), "5");
    for out in OUTPUTS {
        let ma = manifest(a.path(), out);
        assert_eq!(ma.status, "complete", "{out}");
        assert_eq!(ma.seed, 5);
        assert_eq!(stable(ma), stable(manifest(b.path(), out)), "{out}");
        assert_eq!(fs::read(a.path().join(out)).unwrap(), fs::read(b.path().join(out)).unwrap(), "{out}");
    }
    let m = manifest(a.path(), "pre.ckpt");
    assert_eq!(m.run.unwrap().epochs.len(), 2);
    assert!(m.conventions.contains_key("label_ids"));

    let c = workspace();
    pipeline(c.path(), "6");
    assert_ne!(fs::read(a.path().join("pre.ckpt")).unwrap(), fs::read(c.path().join("pre.ckpt")).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    let w = workspace();
    let d = w.path();
    assert_eq!(lmft(d, &["no-such-command"]).status.code(), Some(2));
    assert_eq!(lmft(d, &["tok-train", "--corpus", "missing.txt", "--out", "v.bin"]).status.code(), Some(2));
    fs::write(d.join("bad.toml"), "[model]\nwidth = 3\n").unwrap();
    let out = lmft(d, &["tok-train", "--corpus", "corpus.txt", "--out", "v.bin", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.width"));
    assert_eq!(
        lmft(d, &["evaluate", "--data", "clf.jsonl", "--metric", "ndcg@0", "--predictions", "p", "--out", "r"]).status.code(),
        Some(2)
    );
}

#[test]
fn incompatible_inputs_exit_3() {
    let w = workspace();
    let d = w.path();
    let common = ["--config", "config.toml"];
    ok(d, &[&["tok-train", "--corpus", "corpus.txt", "--out", "vocab.bin"][..], &common].concat());
    ok(d, &[&["tok-train", "--corpus", "corpus.txt", "--out", "other.bin", "--vocab-size", "100"][..], &common].concat());
    ok(d, &[&["lm-pretrain", "--corpus", "corpus.txt", "--vocab", "vocab.bin", "--out", "pre.ckpt", "--epochs", "1"][..], &common].concat());

    // an LM checkpoint has no classifier head
    assert_eq!(lmft(d, &["predict", "--ckpt", "pre.ckpt", "--input", "clf.jsonl", "--out", "p.jsonl"]).status.code(), Some(3));
    let foreign = [&["lm-finetune", "--data", "clf.jsonl", "--ckpt", "pre.ckpt", "--vocab", "other.bin", "--out", "ft.ckpt"][..], &common].concat();
    assert_eq!(lmft(d, &foreign).status.code(), Some(3));

    let mut bytes = fs::read(d.join("pre.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(d.join("broken.ckpt"), bytes).unwrap();
    let out = lmft(d, &[&["lm-finetune", "--data", "clf.jsonl", "--ckpt", "broken.ckpt", "--out", "x.ckpt"][..], &common].concat());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt"));
}

#[test]
fn divergence_exits_4() {
    let w = workspace();
    let d = w.path();
    let common = ["--config", "config.toml"];
    ok(d, &[&["tok-train", "--corpus", "corpus.txt", "--out", "vocab.bin"][..], &common].concat());
    let out = lmft(
        d,
        &[&["lm-pretrain", "--corpus", "corpus.txt", "--vocab", "vocab.bin", "--out", "pre.ckpt", "--lr", "1e38"][..], &common].concat(),
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
