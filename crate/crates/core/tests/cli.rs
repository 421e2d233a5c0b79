mod common;

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use common::stub::Stub;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("task.json"),
            r#"{"name": "toy", "synthetic": {"classes": 3, "train_per_class": 40, "test_per_class": 10}}"#,
        )
        .unwrap();
        fs::write(dir.path().join("mock.json"), r#"{"kind": "mock", "dim": 16}"#).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_fads"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SETUP: [&str; 4] = ["--dataset", "task.json", "--backend", "mock.json"];

fn with_setup<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend(SETUP);
    v.extend(extra);
    v
}

#[test]
fn eval_prints_per_seed_and_aggregate() {
    let f = Fixture::new();
    let o = f.run(&with_setup("eval", &["--shots", "8", "--seeds", "0,1", "--out", "preds.jsonl"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("seed 0: accuracy"));
    assert!(out.contains("fads/m=8/d=1/hidden/lr:"), "{out}");
    let lines = fs::read_to_string(f.path("preds.jsonl")).unwrap();
    // per seed: one metadata line plus one line per test sample
    assert_eq!(lines.lines().count(), 2 * (1 + 30));
}

#[test]
fn config_errors_exit_2() {
    let f = Fixture::new();
    let o = f.run(&with_setup("eval", &["--shots", "1", "--demos", "1"]));
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = f.run(&with_setup("eval", &["--modulator", "forest"]));
    assert_eq!(code(&o), 2);
    let o = f.run(&["eval", "--dataset", "missing.json", "--backend", "mock.json"]);
    assert_eq!(code(&o), 2);
    let o = f.run(&with_setup("fit", &[]));
    assert_eq!(code(&o), 2, "fit without --out");
}

#[test]
fn backend_failures_exit_3() {
    let f = Fixture::new();
    let stub = Stub::start(|_, _, _| (503, "{}".into()));
    fs::write(
        f.path("remote.json"),
        format!(r#"{{"kind": "remote-hidden", "endpoint": "{}", "model_id": "m", "retries": 1, "retry_base_ms": 1}}"#, stub.url),
    )
    .unwrap();
    let o = f.run(&["eval", "--dataset", "task.json", "--backend", "remote.json", "--shots", "4", "--seeds", "0"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stub.hits() >= 2);
}

#[test]
fn data_errors_exit_4() {
    let f = Fixture::new();
    fs::write(
        f.path("bad.json"),
        r#"{"name": "bad", "preset": "sst2", "train": "train.jsonl", "test": "test.jsonl"}"#,
    )
    .unwrap();
    fs::write(f.path("train.jsonl"), "{\"text\": \"fine\", \"label\": 7}\n").unwrap();
    fs::write(f.path("test.jsonl"), "{\"text\": \"ok\", \"label\": 0}\n").unwrap();
    let o = f.run(&["eval", "--dataset", "bad.json", "--backend", "mock.json"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    // too few examples per class for the requested shots
    let o = f.run(&with_setup("eval", &["--shots", "64", "--seeds", "0"]));
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn fit_then_predict() {
    let f = Fixture::new();
    let o = f.run(&with_setup("fit", &["--shots", "8", "--modulator", "svm", "--out", "model.json"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(f.path("model.json").exists());
    fs::write(f.path("texts.txt"), "b0 kalo mi\n{\"text\": \"b1 ra\"}\n\n").unwrap();
    let mut args = vec!["predict"];
    args.extend(SETUP);
    args.extend(["--model", "model.json", "--input", "texts.txt", "--out", "scores.jsonl"]);
    let o = f.run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let scores = fs::read_to_string(f.path("scores.jsonl")).unwrap();
    assert_eq!(scores.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(scores.lines().next().unwrap()).unwrap();
    assert_eq!(first["probs"].as_array().unwrap().len(), 3);
}

#[test]
fn extract_fills_the_cache() {
    let f = Fixture::new();
    let o = f.run(&with_setup("extract", &["--shots", "8", "--seeds", "0,1", "--cache", "cache"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 2);
    let files = fs::read_dir(f.path("cache")).unwrap().count();
    assert!(files >= 2, "cache file and sidecar");
    let o = f.run(&with_setup("extract", &["--shots", "8"]));
    assert_eq!(code(&o), 2, "extract without --cache");
}

#[test]
fn compare_writes_table_csv_and_json() {
    let f = Fixture::new();
    let o = f.run(&with_setup(
        "compare",
        &["--method", "icl,fads", "--shots", "4,8", "--seeds", "0,1", "--workers", "3", "--out", "table.csv"],
    ));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.starts_with("method"));
    assert!(table.contains("m=4") && table.contains("m=8"));
    let csv = fs::read_to_string(f.path("table.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("row,shots,mean,std,seeds,errors"));
    assert_eq!(csv.lines().count(), 5);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("table.json")).unwrap()).unwrap();
    assert_eq!(json["results"].as_array().unwrap().len(), 4);
}

#[test]
fn compare_reads_a_grid_file() {
    let f = Fixture::new();
    fs::write(
        f.path("grid.json"),
        r#"[{"method": "knn-prompting", "shots": 8, "neighbors": {"k": 3}}, {"method": "fads", "shots": 8, "modulator": {"type": "decision-tree"}}]"#,
    )
    .unwrap();
    let o = f.run(&with_setup("compare", &["--grid", "grid.json", "--seeds", "0"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("knn-prompting/d=1/k=3"), "{}", stdout(&o));
}

#[test]
fn compare_fails_when_every_cell_fails() {
    let f = Fixture::new();
    let o = f.run(&with_setup("compare", &["--method", "fads", "--shots", "64", "--seeds", "0"]));
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}
