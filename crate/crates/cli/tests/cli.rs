use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use zqhero::{BatchData, Container};

fn zqhero(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zqhero")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = zqhero(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a toy model and 8 rows of length 16 into `dir`.
fn toy(dir: &Path) -> (PathBuf, PathBuf) {
    let (m, d) = (dir.join("m.zqh"), dir.join("d.zqh"));
    ok(&["gen-toy", "--out", p(&m), "--data", p(&d), "--batches", "2", "--batch-size", "4", "--seq-len", "16", "--seed", "5"]);
    (m, d)
}

fn calibrate(dir: &Path, m: &Path, d: &Path, name: &str) -> PathBuf {
    let c = dir.join(name);
    ok(&["calibrate", "--model", p(m), "--data", p(d), "--out", p(&c), "--batch-size", "4"]);
    c
}

#[test]
fn calibrate_writes_every_site_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (m, d) = toy(dir.path());
    let a = calibrate(dir.path(), &m, &d, "a.json");
    let b = calibrate(dir.path(), &m, &d, "b.json");
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());

    let json: Value = serde_json::from_str(&text).unwrap();
    let sites = json["sites"].as_object().unwrap();
    assert_eq!(sites.len(), 8 * 4);
    for sym in ["S_q", "S_k", "S_v", "S_p", "S_attn", "S_o", "S_a", "S_x2"] {
        assert!(sites.contains_key(&format!("layer3.{sym}")), "{sym}");
    }
    assert_eq!(json["meta"]["batches"], 2);
}

#[test]
fn zero_batches_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (m, d) = toy(dir.path());
    let c = dir.path().join("c.json");
    let out = zqhero(&["calibrate", "--model", p(&m), "--data", p(&d), "--out", p(&c), "--batches", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no calibration data"));
    assert!(!c.exists());
}

#[test]
fn compare_reports_each_mode() {
    let dir = tempfile::tempdir().unwrap();
    let (m, d) = toy(dir.path());
    let c = calibrate(dir.path(), &m, &d, "c.json");

    let fp: Value = serde_json::from_str(&ok(&[
        "compare", "--model", p(&m), "--data", p(&d), "--mode", "FP32", "--format", "json",
    ]))
    .unwrap();
    assert_eq!(fp[0]["hidden"]["cosine"], 1.0);
    assert_eq!(fp[0]["logits"]["cosine"], 1.0);

    let report = dir.path().join("r.json");
    ok(&["compare", "--model", p(&m), "--data", p(&d), "--calib", p(&c), "--format", "json", "--out", p(&report)]);
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for (row, name) in rows.iter().zip(["M1", "M2", "M3"]) {
        assert_eq!(row["mode"], name);
        let cos = row["logits"]["cosine"].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&cos));
        let agree = row["agreement"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&agree));
        assert!(row.get("accuracy").is_some());
    }

    let text = ok(&["compare", "--model", p(&m), "--data", p(&d), "--calib", p(&c)]);
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().next().unwrap().contains("accuracy"));
}

#[test]
fn compare_without_labels_omits_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let (m, d) = toy(dir.path());
    let mut data = BatchData::load(&d).unwrap();
    data.labels = None;
    data.save(&d).unwrap();
    let out: Value =
        serde_json::from_str(&ok(&["compare", "--model", p(&m), "--data", p(&d), "--mode", "FP32", "--format", "json"]))
            .unwrap();
    assert!(out[0].get("accuracy").is_none());
    let text = ok(&["compare", "--model", p(&m), "--data", p(&d), "--mode", "FP32"]);
    assert!(!text.contains("accuracy"));
}

#[test]
fn quantize_and_run() {
    let dir = tempfile::tempdir().unwrap();
    let (m, d) = toy(dir.path());
    let c = calibrate(dir.path(), &m, &d, "c.json");
    let q = dir.path().join("q.zqh");
    ok(&["quantize", "--model", p(&m), "--calib", p(&c), "--mode", "M2", "--out", p(&q)]);
    let container = Container::read(&q).unwrap();
    assert_eq!(container.meta["mode"]["fc2"], "fp");
    assert!(container.tensors.contains_key("layer0.W_o.int8"));
    assert!(!container.tensors.contains_key("layer0.W_2.int8"));

    let o = dir.path().join("o.zqh");
    let summary: Value = serde_json::from_str(&ok(&[
        "run", "--model", p(&m), "--data", p(&d), "--calib", p(&c), "--mode", "M3", "--out", p(&o), "--format", "json",
    ]))
    .unwrap();
    assert_eq!(summary["rows"], 8);
    let out = Container::read(&o).unwrap();
    assert_eq!(out.tensors["logits"].shape(), &[8, 2]);

    let mode = dir.path().join("mode.json");
    std::fs::write(&mode, r#"{"embedding": "int8", "qkv_gemm": "int8", "attn": "fp", "attn_output": "fp", "fc1": "int8", "fc2": "fp"}"#)
        .unwrap();
    let text = ok(&["run", "--model", p(&m), "--data", p(&d), "--calib", p(&c), "--mode", p(&mode)]);
    assert!(text.starts_with("mode M1"));
}

#[test]
fn traffic_report() {
    let out: Value = serde_json::from_str(&ok(&["traffic", "--mode", "M3", "--format", "json"])).unwrap();
    let emb = &out["entries"][0];
    assert_eq!(emb["name"], "embedding_ln");
    assert_eq!(emb["bytes_written"], 98816);
    assert_eq!(out["baseline"][0]["bytes_written"], 196608);
    let fp: Value = serde_json::from_str(&ok(&["traffic", "--mode", "fp32", "--format", "json"])).unwrap();
    assert_eq!(fp["ratio"], 1.0);
}

#[test]
fn exit_codes() {
    assert_eq!(zqhero(&["calibrate"]).status.code(), Some(1));
    assert_eq!(zqhero(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(zqhero(&["traffic", "--format", "xml"]).status.code(), Some(1));
    assert_eq!(zqhero(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.zqh");
    let out = zqhero(&["run", "--model", p(&missing), "--data", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.zqh"));

    let junk = dir.path().join("junk.zqh");
    std::fs::write(&junk, b"not a container").unwrap();
    let out = zqhero(&["run", "--model", p(&junk), "--data", p(&junk)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));

    assert_eq!(zqhero(&["traffic", "--mode", "M9"]).status.code(), Some(2));
}
