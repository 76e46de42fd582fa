use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kdlab::corpus::{corpus_stats, line_hash};
use kdlab::encoder::{EncoderModel, ModelConfig};
use kdlab::loyalty::PredictionSet;
use kdlab::tokenizer::{Casing, Vocab};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn kdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdlab"))
        .args(args)
        .env_remove("KDLAB_CONFIG_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = kdlab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small random teacher matching the fixture vocabulary.
fn teacher(dir: &Path, name: &str, layers: usize, seed: u64) -> PathBuf {
    let vocab = Vocab::load(fixture("toy_vocab.txt"), Casing::Cased).unwrap();
    let cfg = ModelConfig::new(layers, 16, 2, vocab.len()).with_max_position(64);
    let path = dir.join(name);
    EncoderModel::new(cfg, seed).unwrap().save(&path).unwrap();
    path
}

#[test]
fn clean_reports_stats_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.txt");
    std::fs::write(
        &raw,
        "Ion merge la piață în fiecare dimineață.\n\nAm vizitat brașov ieri.\nThe weather is nice today in London.\nMaria citește o carte. Articolul Anterior\n",
    )
    .unwrap();
    let out = dir.path().join("clean.txt");
    let report = ok(&["clean", "--input", s(&raw), "--output", s(&out)]);
    let stats = corpus_stats(&out).unwrap();
    assert_eq!(report["stats"]["lines"], stats.lines);
    assert_eq!(report["stats"]["bytes"], stats.bytes);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(
        text,
        "Ion merge la piață în fiecare dimineață.\nMaria citește o carte.\n"
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("clean.txt.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "clean");
    assert_eq!(manifest["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn clean_dedup_merges_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    std::fs::write(
        &a,
        "Ion merge la piață în fiecare dimineață.\nMaria citește o carte despre istoria orașului.\n",
    )
    .unwrap();
    std::fs::write(
        &b,
        "Maria citește o carte despre istoria orașului.\nCopiii se joacă în parc după școală.\n",
    )
    .unwrap();
    let out = dir.path().join("merged.txt");
    let report = ok(&[
        "clean",
        "--input",
        s(&a),
        "--input",
        s(&b),
        "--output",
        s(&out),
        "--dedup",
    ]);
    assert_eq!(report["stats"]["lines"], 3);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut hashes: Vec<u128> = text.lines().map(line_hash).collect();
    hashes.sort();
    hashes.dedup();
    assert_eq!(hashes.len(), 3);
    assert!(!dir.path().join("merged.txt.part0").exists());
}

#[test]
fn missing_input_names_the_path() {
    let out = kdlab(&["clean", "--input", "/nonexistent/raw.txt", "--output", "/tmp/never.txt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/raw.txt"));
}

#[test]
fn distill_single_and_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let t1 = teacher(dir.path(), "t1.ckpt", 4, 1);
    let t2 = teacher(dir.path(), "t2.ckpt", 4, 2);
    let vocab = fixture("toy_vocab.txt");
    let corpus = fixture("toy_corpus.txt");
    let student = dir.path().join("student.ckpt");
    let common = [
        "--vocab",
        s(&vocab),
        "--corpus",
        s(&corpus),
        "--output",
        s(&student),
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--max-len",
        "24",
    ];
    let mut args = vec!["distill", "--teacher", s(&t1)];
    args.extend(common);
    let single = ok(&args);
    assert_eq!(single["teachers"], 1);
    assert_eq!(single["steps"], 3);
    let loaded = EncoderModel::load(&student).unwrap();
    assert_eq!(loaded.config().num_layers, 2);
    let csv = std::fs::read_to_string(dir.path().join("student.ckpt.metrics.csv")).unwrap();
    assert!(csv.starts_with("step,lr,L_KD,L_MLM,L_COS,total,grad_norm"));

    let mut args = vec!["distill", "--teacher", s(&t1), "--teacher", s(&t2)];
    args.extend(common);
    assert_eq!(ok(&args)["teachers"], 2);

    let mut args = vec!["distill", "--teacher", s(&t1), "--lambda-kd", "0.525"];
    args.extend(common);
    let out = kdlab(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
}

#[test]
fn finetune_predict_evaluate_loyalty_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let enc = teacher(dir.path(), "enc.ckpt", 1, 3);
    let vocab = fixture("toy_vocab.txt");
    let upos = fixture("upos.tsv");
    let model = dir.path().join("upos.ckpt");
    let report = ok(&[
        "finetune",
        "--model",
        s(&enc),
        "--vocab",
        s(&vocab),
        "--task",
        "upos",
        "--train",
        s(&upos),
        "--dev",
        s(&upos),
        "--output",
        s(&model),
        "--epochs",
        "2",
        "--warmup-steps",
        "0",
        "--learning-rate",
        "1e-3",
    ]);
    assert!(report["runs"][0]["dev"]["macro_f1"].is_number());

    let preds = dir.path().join("upos.preds.tsv");
    ok(&[
        "predict",
        "--model",
        s(&model),
        "--vocab",
        s(&vocab),
        "--data",
        s(&upos),
        "--output",
        s(&preds),
    ]);
    let set = PredictionSet::load(&preds).unwrap();
    assert_eq!(set.len(), 32);
    let eval = ok(&[
        "evaluate",
        "--model",
        s(&model),
        "--vocab",
        s(&vocab),
        "--data",
        s(&upos),
        "--predictions",
        s(&preds),
    ]);
    assert_eq!(eval["type"], "tagging");

    let loyal = ok(&["loyalty", "--teacher", s(&preds), "--student", s(&preds)]);
    assert_eq!(loyal["label_loyalty"], 1.0);
    assert_eq!(loyal["probability_loyalty"], 1.0);
    let two = ok(&[
        "loyalty",
        "--teacher",
        s(&preds),
        "--teacher",
        s(&preds),
        "--student",
        s(&preds),
    ]);
    assert_eq!(two["per_teacher"].as_array().unwrap().len(), 2);
    let out = kdlab(&[
        "loyalty",
        "--teacher",
        s(&preds),
        "--student",
        s(&preds),
        "--metric",
        "regression",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Regression"));
}

#[test]
fn finetune_seeds_report_mean_and_std() {
    let dir = tempfile::tempdir().unwrap();
    let enc = teacher(dir.path(), "enc.ckpt", 1, 4);
    let vocab = fixture("toy_vocab.txt");
    let sapn = fixture("sapn.tsv");
    let model = dir.path().join("sapn.ckpt");
    let report = ok(&[
        "finetune",
        "--model",
        s(&enc),
        "--vocab",
        s(&vocab),
        "--task",
        "sapn",
        "--train",
        s(&sapn),
        "--dev",
        s(&sapn),
        "--output",
        s(&model),
        "--epochs",
        "1",
        "--seeds",
        "3",
    ]);
    assert_eq!(report["runs"].as_array().unwrap().len(), 3);
    let acc = &report["summary"]["accuracy"];
    assert_eq!(acc["runs"], 3);
    assert!(acc["mean"].is_number() && acc["std"].is_number());
    assert!(dir.path().join("sapn.ckpt.seed44").exists());
}

#[test]
fn unknown_task_lists_valid_tasks() {
    let out = kdlab(&[
        "finetune", "--model", "m", "--vocab", "v", "--task", "pos", "--train", "t", "--output", "o",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("upos") && err.contains("sts"), "{err}");
}

#[test]
fn format_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let enc = teacher(dir.path(), "enc.ckpt", 1, 5);
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "id\ttext\tlabel\na\tbun\t1\nb\trău\tx\n").unwrap();
    let out = kdlab(&[
        "finetune",
        "--model",
        s(&enc),
        "--vocab",
        s(&fixture("toy_vocab.txt")),
        "--task",
        "sapn",
        "--train",
        s(&bad),
        "--output",
        s(&dir.path().join("o.ckpt")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn bench_config_only_mode() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let plot = dir.path().join("bench.dat");
    let result = ok(&[
        "bench",
        "--arch",
        "2,16,2",
        "--arch",
        "1,16,2",
        "--lengths",
        "16",
        "--reps",
        "3",
        "--output",
        s(&csv),
        "--plot",
        s(&plot),
        "--vocab-size",
        "100",
    ]);
    assert_eq!(result["rows"].as_array().unwrap().len(), 2);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(std::fs::read_to_string(&plot).unwrap().starts_with("# L2-H16-A2\n16 "));
}

#[test]
fn config_dir_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("distill.toml"), "epochs = 2\nbatch_size = 10\n").unwrap();
    let t = teacher(dir.path(), "t.ckpt", 2, 6);
    let student = dir.path().join("s.ckpt");
    let out = Command::new(env!("CARGO_BIN_EXE_kdlab"))
        .args([
            "distill",
            "--teacher",
            s(&t),
            "--vocab",
            s(&fixture("toy_vocab.txt")),
            "--corpus",
            s(&fixture("toy_corpus.txt")),
            "--output",
            s(&student),
            "--epochs",
            "1",
            "--max-len",
            "24",
        ])
        .env("KDLAB_CONFIG_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["steps"], 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["distill"]["batch_size"], 10);
    assert_eq!(manifest["seed"], 42);
}
