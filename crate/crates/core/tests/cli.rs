mod common;

use std::path::Path;
use std::process::{Command, Output};

fn seqrec(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqrec"))
        .arg("--config")
        .arg(common::fixtures().join("config.toml"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn missing_seed_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_seqrec")).arg("prepare").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn bad_override_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqrec(dir.path(), &["--set", "fusion.n_pred=99", "prepare"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_without_prepare_names_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqrec(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("items.jsonl"));
}

#[test]
fn evaluate_without_checkpoint_names_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    ok(seqrec(dir.path(), &["prepare"]));
    let out = seqrec(dir.path(), &["evaluate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint.bin"));
}

#[test]
fn search_finds_the_matching_item() {
    let dir = tempfile::tempdir().unwrap();
    ok(seqrec(dir.path(), &["prepare"]));
    ok(seqrec(dir.path(), &["index"]));
    let out = ok(seqrec(dir.path(), &["search", "cast iron skillet", "--top-k", "3"]));
    assert!(out.lines().next().unwrap().starts_with("B003\t"), "{out}");
}

#[test]
fn full_pipeline_is_reproducible() {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            for verb in ["prepare", "train", "generate", "index", "evaluate"] {
                ok(seqrec(dir.path(), &[verb]));
            }
            dir
        })
        .collect();
    for name in ["manifest.json", "candidates.jsonl", "eval/report.json", "eval/per_user.jsonl", "eval/metrics.csv"] {
        let a = std::fs::read(runs[0].path().join(name)).unwrap();
        let b = std::fs::read(runs[1].path().join(name)).unwrap();
        assert!(a == b, "{name} differs between runs");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(runs[0].path().join("manifest.json")).unwrap()).unwrap();
    for verb in ["prepare", "train", "generate", "index", "evaluate"] {
        assert!(manifest["stages"][verb]["artifacts"].is_object(), "{verb}");
    }
}

#[test]
fn seed_changes_the_checkpoint() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, seed) in [(&a, "17"), (&b, "18")] {
        ok(seqrec(dir.path(), &["--seed", seed, "prepare"]));
        ok(seqrec(dir.path(), &["--seed", seed, "train"]));
    }
    let ca = std::fs::read(a.path().join("checkpoint.bin")).unwrap();
    let cb = std::fs::read(b.path().join("checkpoint.bin")).unwrap();
    assert_ne!(ca, cb);
}
