//! End-to-end runs of the `mos` binary.

use std::path::Path;
use std::process::{Command, Output};

fn mos(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mos"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn mos")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const GEN: &str = "image_size = [32, 32]\nsamples_per_class = 4\n";

const RUN: &str = r#"
data = "data/manifest.csv"

[model]
num_classes = 8

[model.backbone]
dim = 16
depth = 1
heads = 2
patch_size = 8
input_size = [32, 32]

[train]
epochs = 2
batch_size = 16
lr = 0.001
"#;

#[test]
fn full_pipeline_produces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("gen.toml"), GEN).unwrap();
    std::fs::write(root.join("run.toml"), RUN).unwrap();

    ok(&mos(&["gen-data", "--config", "gen.toml", "--out", "data"], root));
    assert!(root.join("data/manifest.csv").is_file());

    ok(&mos(&["train", "--config", "run.toml", "--out", "run"], root));
    let run = root.join("run");
    assert!(run.join("metrics.csv").is_file());
    assert!(run.join("deviation.csv").is_file());
    let ckpt = run.join("checkpoints/final.safetensors");
    assert!(ckpt.is_file());
    let ckpt = ckpt.to_str().unwrap();

    ok(&mos(
        &["eval", "--checkpoint", ckpt, "--manifest", "data/manifest.csv", "--out", "eval.json"],
        root,
    ));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("eval.json")).unwrap()).unwrap();
    assert!(report.is_object());

    ok(&mos(&["analyze", "--run", "run"], root));
    assert!(run.join("deviation_curve.csv").is_file());

    ok(&mos(
        &["export-embeddings", "--checkpoint", ckpt, "--manifest", "data/manifest.csv", "--out", "emb.csv"],
        root,
    ));
    let emb = std::fs::read_to_string(root.join("emb.csv")).unwrap();
    assert!(emb.lines().count() > 1);
}

#[test]
fn existing_run_requires_force() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("gen.toml"), GEN).unwrap();
    std::fs::write(root.join("run.toml"), RUN).unwrap();
    ok(&mos(&["gen-data", "--config", "gen.toml", "--out", "data"], root));
    assert!(!mos(&["gen-data", "--config", "gen.toml", "--out", "data"], root).status.success());
    ok(&mos(&["train", "--config", "run.toml", "--out", "run", "--epochs", "1"], root));
    assert!(!mos(&["train", "--config", "run.toml", "--out", "run", "--epochs", "1"], root).status.success());
    ok(&mos(&["train", "--config", "run.toml", "--out", "run", "--epochs", "1", "--force"], root));
}

#[test]
fn invalid_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "data = \"missing.csv\"\n[train]\nepochs = 0\n").unwrap();
    let out = mos(&["train", "--config", "bad.toml"], dir.path());
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}
