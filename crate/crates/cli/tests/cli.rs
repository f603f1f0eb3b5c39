use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_elsm"));
    c.env("RUST_LOG", "warn");
    c
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn elsm")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "elsm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn toy_config(dir: &Path, variant: &str, epochs: usize) -> PathBuf {
    let path = dir.join(format!("{variant}_{epochs}.json"));
    let cfg = json!({
        "variant": variant,
        "epochs": epochs,
        "learning_rate": 0.01,
        "seed": 1,
        "d": 2,
        "encoder": { "hidden": 8, "head_hidden": 8, "reducer_dim": 2 },
        "priors": { "s1": 0.3, "K": 2 }
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn generate_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = repo("configs/synthetic.json");
    for (dir, seed) in [("a", "4"), ("b", "4"), ("c", "5")] {
        ok(&["generate", "--config", p(&cfg), "--seed", seed, "--out", p(&tmp.path().join(dir))]);
    }
    let read = |d: &str| fs::read(tmp.path().join(d).join("network.txt")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let latents = read_json(&tmp.path().join("a/latents.json"));
    assert_eq!(latents["z"].as_array().unwrap().len(), 10);
    let manifest = read_json(&tmp.path().join("a/manifest.json"));
    assert_eq!(manifest["subcommand"], "generate");
    assert_eq!(manifest["seed"], 4);
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["generate", "--config", "does/not/exist.json", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{ "epochs": 10, "no_such_field": 1 }"#).unwrap();
    let out = run(&["train", "--data", p(&repo("fixtures/toy5.txt")), "--config", p(&bad), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_network_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("broken.txt");
    fs::write(&data, "3 2 0\n0 1 0 1\n0 2 7 1\n").unwrap();
    let out = run(&["train", "--data", p(&data), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.txt:3:"));
}

#[test]
fn missing_network_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["train", "--data", p(&tmp.path().join("absent.txt")), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_toy_writes_all_artifacts() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let start = std::time::Instant::now();
    ok(&["train", "--data", p(&repo("fixtures/toy5.txt")), "--config", p(&repo("configs/train_toy.json")), "--out", p(&out)]);
    assert!(start.elapsed().as_secs() < 60);
    for f in ["checkpoint.bin", "embeddings.json", "training_log.csv", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let emb = read_json(&out.join("embeddings.json"));
    assert_eq!(emb["n"], 5);
    assert_eq!(emb["T"], 4);
    assert!(emb.get("elsm").is_none());
    let log = fs::read_to_string(out.join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 201);
}

#[test]
fn full_variant_exports_discrete_posteriors() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy_config(tmp.path(), "ielsm", 30);
    let out = tmp.path().join("run");
    ok(&["train", "--data", p(&repo("fixtures/toy5.txt")), "--config", p(&cfg), "--variant", "elsm", "--out", p(&out)]);
    let emb = read_json(&out.join("embeddings.json"));
    let e = &emb["elsm"];
    assert_eq!(e["c_hat"].as_array().unwrap().len(), 5);
    assert_eq!(e["h_hat"].as_array().unwrap().len(), 3);
    assert_eq!(e["alpha_mean"].as_array().unwrap().len(), 3);
    for row in e["c_hat"].as_array().unwrap() {
        let s: f64 = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let data = repo("fixtures/toy5.txt");
    let short = toy_config(tmp.path(), "ielsm", 20);
    let long = toy_config(tmp.path(), "ielsm", 40);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["train", "--data", p(&data), "--config", p(&short), "--out", p(&a)]);
    let ck = a.join("checkpoint.bin");
    ok(&["train", "--data", p(&data), "--config", p(&long), "--out", p(&a), "--resume", p(&ck)]);
    ok(&["train", "--data", p(&data), "--config", p(&long), "--out", p(&b)]);

    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["notes"]["start_epoch"], 20);
    let log = fs::read_to_string(a.join("training_log.csv")).unwrap();
    assert!(log.lines().last().unwrap().starts_with("39,"));
    assert_eq!(
        fs::read(a.join("embeddings.json")).unwrap(),
        fs::read(b.join("embeddings.json")).unwrap()
    );
}

#[test]
fn cluster_single_snapshot_has_no_average_row() {
    let tmp = TempDir::new().unwrap();
    let graph = tmp.path().join("one.txt");
    fs::write(&graph, "6 1 0\n0 1 0 1\n0 2 0 1\n0 2 1 1\n0 4 3 1\n0 5 3 1\n0 5 4 1\n").unwrap();
    let out = tmp.path().join("cl");
    ok(&["cluster", "--graph", p(&graph), "--spectral", "--k-max", "3", "--out", p(&out)]);
    assert!(!out.join("communities.csv").exists());
    let csv = fs::read_to_string(out.join("spectral.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "{csv}");
    assert!(lines[1].starts_with("0,2,0.5,"));
}

#[test]
fn cluster_on_trained_embeddings() {
    let tmp = TempDir::new().unwrap();
    let data = repo("fixtures/toy5.txt");
    let run_dir = tmp.path().join("run");
    ok(&["train", "--data", p(&data), "--config", p(&toy_config(tmp.path(), "ielsm", 30)), "--out", p(&run_dir)]);
    let out = tmp.path().join("cl");
    ok(&["cluster", "--embeddings", p(&run_dir.join("embeddings.json")), "--graph", p(&data), "--k-max", "3", "--out", p(&out)]);
    let r = read_json(&out.join("communities.json"));
    assert_eq!(r["labels"].as_array().unwrap().len(), 4);
    let csv = fs::read_to_string(out.join("communities.csv")).unwrap();
    assert!(csv.lines().last().unwrap().starts_with("average,"));
}

#[test]
fn cluster_rejects_mismatched_embeddings() {
    let tmp = TempDir::new().unwrap();
    let run_dir = tmp.path().join("run");
    ok(&["train", "--data", p(&repo("fixtures/toy5.txt")), "--config", p(&toy_config(tmp.path(), "ielsm", 5)), "--out", p(&run_dir)]);
    let graph = tmp.path().join("other.txt");
    fs::write(&graph, "3 4 0\n0 1 0 1\n").unwrap();
    let out = run(&["cluster", "--embeddings", p(&run_dir.join("embeddings.json")), "--graph", p(&graph), "--out", p(&tmp.path().join("cl"))]);
    assert!(!out.status.success());
}

#[test]
fn linkpred_baseline_only() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("lp");
    ok(&["linkpred", "--data", p(&repo("fixtures/toy5.txt")), "--baselines", "bas", "--targets", "2", "--out", p(&out)]);
    let csv = fs::read_to_string(out.join("linkpred.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "target,method,auc,f1,threshold");
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().skip(1).all(|l| l.contains(",bas,")));
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["notes"]["rounds"][0], json!({ "history": [0, 1], "target": 2 }));
}

#[test]
fn linkpred_with_model() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("lp");
    let cfg = toy_config(tmp.path(), "ielsm", 20);
    ok(&["linkpred", "--data", p(&repo("fixtures/toy5.txt")), "--config", p(&cfg), "--baselines", "bas", "--targets", "1", "--out", p(&out)]);
    let r = read_json(&out.join("linkpred.json"));
    let methods: Vec<&str> = r["averages"].as_array().unwrap().iter().map(|a| a["method"].as_str().unwrap()).collect();
    assert!(methods.contains(&"ielsm") && methods.contains(&"bas"), "{methods:?}");
}

#[test]
fn eval_metrics_perfect_prediction() {
    let tmp = TempDir::new().unwrap();
    let truth = tmp.path().join("truth.json");
    let pred = tmp.path().join("pred.json");
    fs::write(&truth, "[[0,1,0],[1,0,1],[0,1,0]]").unwrap();
    fs::write(&pred, "[[0,0.9,0.1],[0.9,0,0.8],[0.1,0.8,0]]").unwrap();
    let metrics_path = tmp.path().join("m/metrics.json");
    fs::create_dir_all(metrics_path.parent().unwrap()).unwrap();
    let out = ok(&["eval-metrics", "--pred", p(&pred), "--truth", p(&truth), "--out", p(&metrics_path)]);
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["auc"], 1.0);
    assert_eq!(m["f1"], 1.0);
    assert_eq!(m["pairs"], 3);
    assert_eq!(read_json(&metrics_path), m);
}

#[test]
fn eval_metrics_against_network_snapshot() {
    let tmp = TempDir::new().unwrap();
    let pred = tmp.path().join("pred.json");
    let rows: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| if i == j { 0.0 } else { 0.5 }).collect()).collect();
    fs::write(&pred, serde_json::to_string(&rows).unwrap()).unwrap();
    let out = ok(&["eval-metrics", "--pred", p(&pred), "--truth", p(&repo("fixtures/toy5.txt")), "--snapshot", "1"]);
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["auc"], 0.5);
    let out = run(&["eval-metrics", "--pred", p(&pred), "--truth", p(&repo("fixtures/toy5.txt")), "--snapshot", "9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_metrics_shape_mismatch_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let truth = tmp.path().join("truth.json");
    let pred = tmp.path().join("pred.json");
    fs::write(&truth, "[[0,1,0],[1,0,1],[0,1,0]]").unwrap();
    fs::write(&pred, "[[0,1],[1,0]]").unwrap();
    let out = run(&["eval-metrics", "--pred", p(&pred), "--truth", p(&truth)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn prepare_windows_an_edge_list() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("prep");
    ok(&[
        "prepare", "--edges", p(&repo("fixtures/toy_edges.txt")), "--window", "10", "--count", "2", "--binarize", "--out", p(&out),
    ]);
    let net = fs::read_to_string(out.join("network.txt")).unwrap();
    assert!(net.starts_with("4 2 0\n"), "{net}");
    let nodes = read_json(&out.join("nodes.json"));
    assert_eq!(nodes.as_array().unwrap().len(), 4);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["notes"]["self_loops_dropped"], 1);

    let top = tmp.path().join("top");
    ok(&[
        "prepare", "--edges", p(&repo("fixtures/toy_edges.txt")), "--window", "10", "--count", "2", "--top", "3", "--out", p(&top),
    ]);
    assert_eq!(read_json(&top.join("nodes.json")).as_array().unwrap().len(), 3);
    assert!(fs::read_to_string(top.join("network.txt")).unwrap().starts_with("3 2 1\n"));
}
