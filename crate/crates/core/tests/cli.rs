use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use joint_slu::data::{synthetic, write_dataset};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_joint-slu");

const SMALL: [&str; 12] = [
    "--num-layers", "1", "--hidden-size", "16", "--num-heads", "2", "--ffn-size", "32", "--epochs", "2", "--batch-size",
    "32",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn joint-slu")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

/// One small trained model plus en/it corpora on disk, shared by all tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        write_dataset(root.join("en"), &synthetic::default_corpus()).unwrap();
        write_dataset(root.join("it"), &synthetic::second_language_corpus(77, "it")).unwrap();
        let (data, out) = (root.join("en"), root.join("run"));
        let mut args = vec!["train", "--data", s(&data), "--output-dir", s(&out)];
        args.extend(SMALL);
        ok(&args);
        Fixture { _tmp: tmp, root }
    })
}

#[test]
fn train_writes_artifacts() {
    let run = fixture().root.join("run");
    for f in ["effective_config.json", "train_log.jsonl", "metrics.json", "model/config.json", "model/weights.bin"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    for r in &records {
        let a = r["alpha"].as_f64().unwrap();
        let b = r["beta"].as_f64().unwrap();
        assert!((a + b - 2.0).abs() < 1e-9);
        assert_eq!(r["phase"], "finetune");
    }
}

#[test]
fn effective_config_reproduces_the_run() {
    let f = fixture();
    let again = f.root.join("rerun");
    let config = f.root.join("run/effective_config.json");
    ok(&["train", "--config", s(&config), "--output-dir", s(&again)]);
    for file in ["train_log.jsonl", "metrics.json"] {
        assert_eq!(
            std::fs::read(f.root.join("run").join(file)).unwrap(),
            std::fs::read(again.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn predict_streams_one_record_per_line() {
    let model = fixture().root.join("run/model");
    let mut child = Command::new(BIN)
        .args(["predict", "--archive", s(&model)])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"play with or without you by u2\n\nweather in paris tomorrow\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0]["intent"].is_string());
    assert_eq!(lines[0]["tags"].as_array().unwrap().len(), 7);
    assert!(lines[1]["intent"].is_null());
    assert!(lines[1]["tags"].as_array().unwrap().is_empty());
    assert_eq!(lines[2]["tags"].as_array().unwrap().len(), 4);
}

#[test]
fn eval_reports_per_language() {
    let f = fixture();
    let out = ok(&[
        "eval",
        "--archive",
        s(&f.root.join("run/model")),
        "--data",
        s(&f.root.join("en")),
        s(&f.root.join("it")),
        "--languages",
        "en",
        "it",
        "--per-language",
    ]);
    let report: Value = serde_json::from_str(out.trim()).unwrap();
    assert!(report["per_language"]["en"]["intent_accuracy"].is_number());
    assert!(report["per_language"]["it"]["slot_f1"].is_number());
    assert_eq!(report["sentences"], 200);
}

#[test]
fn eval_writes_conll() {
    let f = fixture();
    let conll = f.root.join("test.conll");
    ok(&[
        "eval",
        "--archive",
        s(&f.root.join("run/model")),
        "--data",
        s(&f.root.join("en")),
        "--conll",
        s(&conll),
    ]);
    let text = std::fs::read_to_string(conll).unwrap();
    assert_eq!(text.split("\n\n").filter(|b| !b.trim().is_empty()).count(), 100);
}

#[test]
fn exit_codes() {
    let f = fixture();
    let out_dir = f.root.join("bad");
    let missing = run(&["train", "--data", "/nonexistent/corpus", "--output-dir", s(&out_dir)]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/corpus"));

    let heads = run(&["train", "--synthetic", "--hidden-size", "10", "--num-heads", "4", "--output-dir", s(&out_dir)]);
    assert_eq!(heads.status.code(), Some(2));

    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(2));

    let lower = run(&[
        "eval",
        "--archive",
        s(&f.root.join("run/model")),
        "--data",
        s(&f.root.join("en")),
        "--lowercase",
    ]);
    assert_eq!(lower.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&lower.stderr).contains("lowercase"));
}

#[test]
fn pretrain_then_warm_start() {
    let f = fixture();
    let pre = f.root.join("pre");
    let en = f.root.join("en");
    let mut args = vec!["pretrain", "--data", s(&en), "--output-dir", s(&pre)];
    args.extend(SMALL);
    ok(&args);
    let log = std::fs::read_to_string(pre.join("train_log.jsonl")).unwrap();
    assert!(log.lines().all(|l| l.contains("\"pretrain\"")));
    let encoder = pre.join("encoder");

    let warm = f.root.join("warm");
    let mut args = vec![
        "train",
        "--data",
        s(&en),
        "--init-from",
        s(&encoder),
        "--output-dir",
        s(&warm),
    ];
    args.extend(SMALL);
    ok(&args);
    assert!(warm.join("model/weights.bin").is_file());

    let clash = run(&[
        "train",
        "--data",
        s(&f.root.join("en")),
        "--init-from",
        s(&encoder),
        "--num-layers",
        "1",
        "--hidden-size",
        "32",
        "--num-heads",
        "2",
        "--output-dir",
        s(&f.root.join("clash")),
    ]);
    assert_eq!(clash.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&clash.stderr).contains("hidden_size"));
}

#[test]
fn project_preserves_cardinality() {
    let f = fixture();
    let pairs = f.root.join("pairs.jsonl");
    let records = [
        r#"{"source_tokens":["play","thriller","by","michael","jackson"],"source_tags":["O","B-song","O","B-artist","I-artist"],"intent":"PlayMusic","target_tokens":["suona","thriller","di","michael","jackson"],"alignment":[[0,0],[1,1],[2,2],[3,3],[4,4]]}"#,
        r#"{"source_tokens":["weather","in","rome"],"source_tags":["O","O","B-city"],"intent":"GetWeather","target_tokens":["meteo","a","roma"],"alignment":[[0,0],[1,1],[2,2]]}"#,
    ];
    std::fs::write(&pairs, records.join("\n") + "\n").unwrap();
    let out = f.root.join("projected");
    ok(&["project", "--input", s(&pairs), "--output-dir", s(&out)]);
    let read = |name: &str| std::fs::read_to_string(out.join(name)).unwrap();
    let seq_in: Vec<String> = read("seq.in").lines().map(str::to_string).collect();
    let seq_out: Vec<String> = read("seq.out").lines().map(str::to_string).collect();
    let labels: Vec<String> = read("label").lines().map(str::to_string).collect();
    assert_eq!((seq_in.len(), seq_out.len(), labels.len()), (2, 2, 2));
    for (a, b) in seq_in.iter().zip(&seq_out) {
        assert_eq!(a.split_whitespace().count(), b.split_whitespace().count());
    }
    assert_eq!(seq_out[1], "O O B-city");
    assert_eq!(labels, ["PlayMusic", "GetWeather"]);
}
