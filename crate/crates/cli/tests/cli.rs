use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn cscpr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cscpr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// A run config with a model small enough for quick end-to-end runs.
fn small_config(dir: &Path) -> String {
    let layer = |d: usize, p: usize, c: usize, k: usize, ck: usize| {
        json!({"feature_dim": d, "points_out": p, "centers": c, "knn_k": k, "cluster_k": ck})
    };
    let cfg = json!({
        "schema": "cscpr-run/1",
        "synthetic": {"scenes": 2, "frames_per_scene": 20},
        "model": {
            "extractor": {
                "layers": [layer(16, 200, 50, 12, 8), layer(24, 80, 20, 10, 6), layer(32, 30, 10, 6, 4)],
                "descriptor_dim": 32,
                "rerank_layer": 1
            },
            "scc": {"in_dim": 24, "branch_dim": 24, "center_dim": 16, "num_groups": 4, "num_centers": 20, "knn_k": 12},
            "cscc": {"center_dim": 16, "hidden_dim": 16, "top_k": 100}
        },
        "eval": {"top_n": 10, "top_r": 5}
    });
    let path = dir.join("run.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn strip_timing(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timing_ms");
    v
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cscpr(dir.path(), &["--help"])), 0);
    assert_eq!(code(&cscpr(dir.path(), &["evaluate", "--bogus"])), 1);
    assert_eq!(code(&cscpr(dir.path(), &["gen-dataset", "--out", "m.json"])), 1);
    let out = cscpr(dir.path(), &["gen-dataset", "--synthetic", "1", "--frames", "10", "--t-p", "0.2", "--t-n", "0.5", "--out", "m.json"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unreadable_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = cscpr(dir.path(), &["evaluate", "--manifest", "absent.json", "--out", "r.json"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));

    fs::write(dir.path().join("bad.json"), r#"{"schema": "cscpr-run/1", "sed": 3}"#).unwrap();
    assert_eq!(code(&cscpr(dir.path(), &["--config", "bad.json", "selftest"])), 2);
    fs::write(dir.path().join("old.json"), r#"{"schema": "cscpr-run/0"}"#).unwrap();
    assert_eq!(code(&cscpr(dir.path(), &["--config", "old.json", "selftest"])), 2);
}

#[test]
fn oracle_evaluation_is_perfect_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = cscpr(d, &["--seed", "4", "gen-dataset", "--synthetic", "2", "--frames", "30", "--out", "data/m.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = read_json(&d.join("data/m.json"));
    assert_eq!(manifest["config"]["seed"], 4);
    assert_eq!(manifest["scenes"].as_array().unwrap().len(), 2);
    // cloud paths are relative to the manifest so the directory can move
    let path = manifest["scenes"][0]["frames"][0]["cloud_path"].as_str().unwrap();
    assert!(Path::new(path).is_relative() && d.join("data").join(path).exists());

    for name in ["r1.json", "r2.json"] {
        let out = cscpr(d, &["evaluate", "--manifest", "data/m.json", "--descriptors", "oracle", "--k", "1", "--k", "5", "--out", name]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).contains("Recall@1: 1.0000"));
    }
    let (r1, r2) = (read_json(&d.join("r1.json")), read_json(&d.join("r2.json")));
    assert_eq!(r1["recall_at"]["1"], 1.0);
    assert_eq!(r1["config"]["ks"], json!([1, 5]));
    assert_eq!(r1["run_config"]["schema"], "cscpr-run/1");
    assert!(r1["timing_ms"]["total"].is_number());
    assert_eq!(strip_timing(r1), strip_timing(r2));
}

#[test]
fn rigid_pack_passes_geometric_verification() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = cscpr(d, &["gen-dataset", "--synthetic", "2", "--rigid", "4", "--out", "m.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = cscpr(d, &["evaluate", "--manifest", "m.json", "--descriptors", "oracle", "--reranker", "kabsch", "--out", "r.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(&d.join("r.json"));
    assert_eq!(r["recall_at"]["1"], 1.0);
    let first = &r["queries"][0]["ranked"]["candidates"][0];
    assert!(first["rerank_score"].is_number());
}

#[test]
fn extract_retrieve_and_rerank_with_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let run = |args: &[&str]| {
        let mut all = vec!["--config", cfg.as_str()];
        all.extend_from_slice(args);
        let out = cscpr(d, &all);
        assert_eq!(code(&out), 0, "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
        out
    };
    run(&["gen-dataset", "--synthetic", "2", "--out", "m.json"]);
    let manifest = read_json(&d.join("m.json"));
    let cloud = d.join(manifest["scenes"][0]["frames"][1]["cloud_path"].as_str().unwrap());
    let cloud = cloud.to_string_lossy().into_owned();

    run(&["extract", "--cloud", &cloud, "--out", "e.json"]);
    let e = read_json(&d.join("e.json"));
    assert_eq!(e["run_config"]["model"]["extractor"]["descriptor_dim"], 32);

    run(&["retrieve", "--manifest", "m.json", "--query", &cloud, "--out", "ret.json"]);
    let ret = read_json(&d.join("ret.json"));
    let cands = ret["candidates"].as_array().unwrap();
    assert!(!cands.is_empty() && cands.len() <= 10);

    run(&["rerank", "--manifest", "m.json", "--query", &cloud, "--top-r", "3", "--out", "rr.json"]);
    let rr = read_json(&d.join("rr.json"));
    let ids = |v: &Value| {
        let mut ids: Vec<String> = v["candidates"].as_array().unwrap().iter().map(|c| c["frame_id"].as_str().unwrap().to_string()).collect();
        ids.sort();
        ids
    };
    assert_eq!(ids(&rr), ids(&ret));

    let out = run(&["evaluate", "--manifest", "m.json", "--reranker", "cscc", "--k", "1", "--k", "3", "--out", "r.json"]);
    let r = read_json(&d.join("r.json"));
    assert!(r["recall_at"]["1"].as_f64().unwrap() <= r["recall_at"]["3"].as_f64().unwrap());
    assert!(stdout(&out).contains("Recall@3"));
}

#[test]
fn gradient_check_and_short_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = cscpr(d, &["grad-check", "--instances", "3"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).lines().any(|l| l.starts_with("cscc.l_f.weight") && l.ends_with("ok")));

    let cfg = small_config(d);
    let out = cscpr(d, &["--config", &cfg, "toy-train", "--steps", "3", "--out", "t.csv", "--weights-out", "w.bin"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(d.join("t.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# run-config: {"));
    assert_eq!(lines.next().unwrap(), "step,lt,lc,total,lr");
    assert_eq!(lines.count(), 3);
    assert!(d.join("w.bin").exists());

    // trained weights load back for evaluation
    let out = cscpr(d, &["--config", &cfg, "gen-dataset", "--synthetic", "1", "--frames", "12", "--out", "m.json"]);
    assert_eq!(code(&out), 0);
    let out = cscpr(d, &["--config", &cfg, "evaluate", "--manifest", "m.json", "--weights", "w.bin", "--reranker", "cscc", "--out", "r.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = cscpr(dir.path(), &["selftest"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("PASS")).count(), 5);
}
