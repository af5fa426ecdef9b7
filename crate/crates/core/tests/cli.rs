use std::path::Path;
use std::process::{Command, Output};

fn gcdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcdlab")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gcdlab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // missing --seed is a usage error
    assert_eq!(gcdlab(&["synth", "--out", p(&d.join("x"))]).status.code(), Some(2));
    // missing checkpoint names the stage to run
    let out = gcdlab(&["sample", "--ckpt", p(&d.join("none.json")), "--graphs", p(d), "--seed", "1", "--out", p(&d.join("o"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-diffusion"));
    // malformed config
    std::fs::write(d.join("bad.json"), "{\"seed\": 1}").unwrap();
    assert_eq!(gcdlab(&["run", "--config", p(&d.join("bad.json"))]).status.code(), Some(2));
    assert_eq!(gcdlab(&["report", "--root", p(d)]).status.code(), Some(4));
}

#[test]
fn stepwise_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("exp.json");
    ok(&["config", "--preset", "smoke", "--root", p(&d.join("runs")), "--seed", "3", "--out", p(&cfg)]);
    let c = p(&cfg);
    let data = d.join("data");
    ok(&["synth", "--out", p(&data), "--seed", "5", "--config", c]);
    let emb = d.join("emb.json");
    ok(&["train-embedder", "--data", p(&data), "--out", p(&emb), "--seed", "5", "--config", c]);
    let graphs = d.join("graphs");
    let s = ok(&["extract", "--data", p(&data), "--out", p(&graphs), "--embedder", p(&emb), "--config", c]);
    assert!(s.contains("wrote 8 graphs"));
    assert_eq!(gcdlab(&["extract", "--data", p(&data), "--out", p(&graphs), "--config", c]).status.code(), Some(2));
    let casc = d.join("cascade.json");
    ok(&["train-diffusion", "--data", p(&data), "--graphs", p(&graphs), "--out", p(&casc), "--seed", "5", "--config", c]);

    let removed = d.join("removed");
    ok(&["intervene", "--graphs", p(&graphs), "--kind", "remove", "--seed", "1", "--out", p(&removed)]);
    let cp = d.join("cp");
    let s = ok(&["intervene", "--graphs", p(&graphs), "--kind", "cutpaste-short", "--count", "3", "--seed", "1", "--out", p(&cp)]);
    assert!(s.contains("wrote 3 graphs"));
    let interp = d.join("interp");
    ok(&["intervene", "--graphs", p(&graphs), "--kind", "interp", "--t", "0.5", "--count", "2", "--seed", "1", "--out", p(&interp)]);
    let changed = d.join("changed");
    ok(&["intervene", "--graphs", p(&graphs), "--kind", "change", "--node", "0", "--to-class", "2", "--seed", "1", "--out", p(&changed)]);

    let gen = d.join("gen");
    ok(&["sample", "--ckpt", p(&casc), "--graphs", p(&cp), "--seed", "9", "--out", p(&gen), "--steps", "4"]);
    let seg = d.join("seg.json");
    ok(&["segment-train", "--data", p(&data), "--out", p(&seg), "--seed", "2", "--config", c]);
    let rep = d.join("seg_report.json");
    ok(&["segment-eval", "--ckpt", p(&seg), "--test", p(&data), "--out", p(&rep)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    assert!(v["dice"].is_number() && v["aji"].is_number());
    let fid = d.join("fid.json");
    ok(&["evaluate", "--real", p(&data), "--gen", p(&gen), "--ckpt", p(&emb), "--out", p(&fid), "--k", "2"]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&fid).unwrap()).unwrap();
    assert!(v["ip"].is_number() && v["ir"].is_number() && v["fid"].is_number());
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("exp.json");
    ok(&["config", "--preset", "smoke", "--root", p(&d.join("runs")), "--seed", "3", "--out", p(&cfg)]);
    ok(&["run", "--config", p(&cfg)]);
    let table = ok(&["report", "--root", p(&d.join("runs"))]);
    assert!(table.contains("cut-paste-short"));
    assert!(table.lines().count() >= 4);
}
