mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ensview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ensview"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn build_select_export() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("toy.csv");
    std::fs::write(&csv, common::toy_csv(150)).unwrap();
    let lib = dir.path().join("lib");
    let out = ensview(&[
        "build-library",
        "--data",
        csv.to_str().unwrap(),
        "--label",
        "y",
        "--test-fraction",
        "0.2",
        "--folds",
        "5",
        "--seed",
        "3",
        "--categorical",
        "shade",
        "--out",
        lib.to_str().unwrap(),
    ]);
    let stdout = ok(&out);
    assert!(stdout.contains("built 49 models"), "{stdout}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("[49/49]"));
    let manifest = read_json(&lib.join("manifest.json"));
    assert_eq!(manifest["training_runs"], 294);
    assert_eq!(manifest["n_folds"], 5);
    assert!(lib.join("cache/0.f32").exists() && lib.join("models/48.bin").exists());

    let ens = dir.path().join("ensemble.json");
    let stdout = ok(&ensview(&[
        "auto-select",
        "--lib",
        lib.to_str().unwrap(),
        "--metric",
        "acc_cv",
        "--max-size",
        "4",
        "--bags",
        "2",
        "--seed",
        "1",
        "--out",
        ens.to_str().unwrap(),
    ]));
    assert!(stdout.starts_with("hillclimb=acc_cv max_size=4 bags=2"), "{stdout}");
    let doc = read_json(&ens);
    let members = doc["members"].as_array().unwrap();
    assert!(!members.is_empty() && members.len() <= 4 * 2);
    assert!(doc["perf"]["accuracy_test"].is_f64());
    assert_eq!(doc["trace"]["params"]["bags"], 2);

    for mode in ["attribute:x2", "pca", "mds", "tsne"] {
        let frame = dir.path().join("frame.json");
        ok(&ensview(&[
            "export-layout",
            "--lib",
            lib.to_str().unwrap(),
            "--mode",
            mode,
            "--ensemble",
            ens.to_str().unwrap(),
            "--perplexity",
            "5",
            "--tsne-iters",
            "250",
            "--out",
            frame.to_str().unwrap(),
        ]));
        let f = read_json(&frame);
        assert_eq!(f["mode"], mode);
        assert_eq!(f["points"].as_array().unwrap().len(), 30);
        assert!(f["x_extent"].is_array() && f["y_extent"].is_array());
        assert_eq!(f["seed"].is_u64(), mode == "tsne");
    }

    let frame = dir.path().join("sampled.json");
    ok(&ensview(&[
        "export-layout",
        "--lib",
        lib.to_str().unwrap(),
        "--mode",
        "pca",
        "--viz-sample",
        "12",
        "--out",
        frame.to_str().unwrap(),
    ]));
    assert_eq!(read_json(&frame)["points"].as_array().unwrap().len(), 12);
}

#[test]
fn replay_matches_itself_and_reports_failures() {
    let dir = tempfile::tempdir().unwrap();
    common::toy_library(dir.path(), 160);
    let lib = dir.path().join("lib");
    let script = dir.path().join("calls.jsonl");
    std::fs::write(
        &script,
        concat!(
            "{\"op\":\"create_session\"}\n",
            "{\"op\":\"selection\",\"session\":\"s1\",\"rect\":{\"x0\":0,\"x1\":2,\"y0\":0,\"y1\":0.5}}\n",
            "{\"op\":\"errors_filter\",\"session\":\"s1\",\"on\":true}\n",
            "{\"op\":\"toggle\",\"session\":\"s1\",\"model_id\":3}\n",
            "{\"op\":\"toggle\",\"session\":\"s1\",\"model_id\":42}\n",
            "{\"op\":\"cv\",\"session\":\"s1\"}\n",
        ),
    )
    .unwrap();
    let run = |name: &str| {
        let snap = dir.path().join(name);
        let stdout = ok(&ensview(&[
            "replay",
            "--lib",
            lib.to_str().unwrap(),
            "--script",
            script.to_str().unwrap(),
            "--out",
            snap.to_str().unwrap(),
        ]));
        (stdout, std::fs::read(&snap).unwrap())
    };
    let (out_a, snap_a) = run("a.json");
    let (out_b, snap_b) = run("b.json");
    assert_eq!(out_a, out_b);
    assert_eq!(snap_a, snap_b);
    let lines: Vec<Value> = out_a.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[4]["ok"], false);
    assert_eq!(lines[4]["status"], 400);
    let snaps: Value = serde_json::from_slice(&snap_a).unwrap();
    assert_eq!(snaps[0]["revision"], 3);
}

#[test]
fn bad_invocations_fail() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = ensview(&["auto-select", "--lib", missing.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("opening library"));
    assert!(!ensview(&["build-library", "--label", "y"]).status.success());
    let csv = dir.path().join("t.csv");
    std::fs::write(&csv, common::toy_csv(40)).unwrap();
    let out = ensview(&[
        "build-library",
        "--data",
        csv.to_str().unwrap(),
        "--label",
        "y",
        "--grid",
        "huge",
        "--out",
        dir.path().join("l").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}
