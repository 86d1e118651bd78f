use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use inferlab_core::ir::{write_container, Tensor};

fn inferlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inferlab")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn header_hash(text: &str) -> String {
    let first = text.lines().next().unwrap();
    let hash = first.strip_prefix("# inferlab 0.1.0 input-sha256=").unwrap_or_else(|| panic!("bad header {first}"));
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    hash.to_string()
}

#[test]
fn outputs_carry_provenance() {
    let t = tempfile::tempdir().unwrap();
    let fx = t.path().join("fx");
    assert!(inferlab(&["fixture", "single_fc", "--out", s(&fx)]).status.success());
    let out = t.path().join("deep/nested/out");
    let o = inferlab(&["analyze", "--model", s(&fx.join("model.json")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("costs.csv")).unwrap();
    let hash = header_hash(&csv);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["generator"]["input_sha256"], hash.as_str());
    assert_eq!(summary["generator"]["tool"], "inferlab 0.1.0");

    let fx2 = t.path().join("fx2");
    assert!(inferlab(&["fixture", "single_fc", "--seed", "1", "--out", s(&fx2)]).status.success());
    let out2 = t.path().join("out2");
    assert!(inferlab(&["analyze", "--model", s(&fx2.join("model.json")), "--out", s(&out2)]).status.success());
    assert_ne!(header_hash(&fs::read_to_string(out2.join("costs.csv")).unwrap()), hash);
}

#[test]
fn missing_input_is_an_io_error() {
    let t = tempfile::tempdir().unwrap();
    let o = inferlab(&["analyze", "--model", s(&t.path().join("nope.json")), "--out", s(t.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.json"));
}

#[test]
fn malformed_model_is_invalid_input() {
    let t = tempfile::tempdir().unwrap();
    let m = t.path().join("bad.json");
    fs::write(&m, "{ \"nodes\": [ }").unwrap();
    let o = inferlab(&["analyze", "--model", s(&m), "--out", s(&t.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.json"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(inferlab(&["fixture", "no_such", "--out", "/tmp/x"]).status.code(), Some(2));
    assert_eq!(inferlab(&["analyze"]).status.code(), Some(2));
    assert_eq!(inferlab(&["bench", "--kernel", "fp64", "--out", "/tmp/x"]).status.code(), Some(2));
}

#[test]
fn non_finite_calibration_data_is_a_numeric_error() {
    let t = tempfile::tempdir().unwrap();
    let fx = t.path().join("fx");
    assert!(inferlab(&["fixture", "toy_cnn", "--out", s(&fx)]).status.success());
    let mut data = vec![0.5f32; 4 * 3 * 64];
    data[7] = f32::NAN;
    let batch = BTreeMap::from([("batch0/image".to_string(), Tensor::from_f32(vec![4, 3, 8, 8], data).unwrap())]);
    let calib = t.path().join("nan.dliw");
    fs::write(&calib, write_container(batch.iter().map(|(k, v)| (k.as_str(), v))).unwrap()).unwrap();
    let o = inferlab(&["quantize", "--model", s(&fx.join("model.json")), "--calib", s(&calib), "--out", s(&t.path().join("q"))]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn quantized_run_uses_plan() {
    let t = tempfile::tempdir().unwrap();
    let fx = t.path().join("fx");
    assert!(inferlab(&["fixture", "toy_cnn_sensitive", "--out", s(&fx)]).status.success());
    let q = t.path().join("q");
    let model = fx.join("model.json");
    assert!(inferlab(&["quantize", "--model", s(&model), "--calib", s(&fx.join("calib.dliw")), "--out", s(&q)]).status.success());
    let r = t.path().join("r");
    let o = inferlab(&[
        "run",
        "--model",
        s(&model),
        "--inputs",
        s(&fx.join("inputs.dliw")),
        "--plan",
        s(&q.join("plan.json")),
        "--out",
        s(&r),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(r.join("trace.jsonl")).unwrap();
    header_hash(&trace);
    let records: Vec<serde_json::Value> = trace.lines().skip(1).map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 7);
    assert!(records.iter().any(|r| r["node"] == "conv2"));
    header_hash(&fs::read_to_string(r.join("ops.csv")).unwrap());

    let f = t.path().join("f32");
    assert!(inferlab(&["run", "--model", s(&model), "--inputs", s(&fx.join("inputs.dliw")), "--out", s(&f)]).status.success());
    assert_ne!(fs::read(r.join("outputs.dliw")).unwrap(), fs::read(f.join("outputs.dliw")).unwrap());
}

#[test]
fn bench_defaults_cover_every_kernel() {
    let t = tempfile::tempdir().unwrap();
    let o = inferlab(&["bench", "--m", "8", "--n", "8", "--k", "8", "--repeats", "1", "--out", s(t.path())]);
    assert!(o.status.success());
    let csv = fs::read_to_string(t.path().join("bench.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 4);
    assert!(csv.lines().nth(1).unwrap() == "kernel,M,N,K,intensity,gops");
}
