use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_circuitcl"))
}

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/corpus")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&["--seed", seed, "augment", s(&corpus()), "--n-pos", "4", "--n-neg", "4", "--out", s(&out)]);
    out
}

#[test]
fn parse_prints_graph_json() {
    let out = ok(&["parse", s(&corpus().join("inverter.sp"))]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["name"], "inverter");
    assert!(v["arcs"].as_array().unwrap().len() > 4);
}

#[test]
fn parse_emit_graph_writes_file() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("g.json");
    let out = ok(&["parse", s(&corpus().join("nand2.sp")), "--emit-graph", s(&path)]);
    assert!(out.stdout.is_empty());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(v["name"], "nand2");
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(&["parse", "/nonexistent.sp"]).status.code(), Some(1));

    let bad = dir.path().join("bad.sp");
    fs::write(&bad, "R1 a\n").unwrap();
    assert_eq!(run(&["parse", s(&bad)]).status.code(), Some(1));

    assert_eq!(run(&["bogus"]).status.code(), Some(3));
    assert_eq!(run(&["train-task", "4", "--out", "x"]).status.code(), Some(3));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[loss]\ntau = -1.0\n").unwrap();
    assert_eq!(run(&["--config", s(&cfg), "parse", s(&corpus().join("inverter.sp"))]).status.code(), Some(3));
    fs::write(&cfg, "unknown_key = 1\n").unwrap();
    assert_eq!(run(&["--config", s(&cfg), "parse", s(&corpus().join("inverter.sp"))]).status.code(), Some(3));

    let out = run(&["train-task", "1", "--depths", "1,0,0", "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn augment_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = small_dataset(dir.path(), "a", "5");
    let b = small_dataset(dir.path(), "b", "5");
    let c = small_dataset(dir.path(), "c", "6");
    let read = |p: &Path| fs::read(p.join("manifest.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let manifest: serde_json::Value = serde_json::from_slice(&read(&a)).unwrap();
    assert!(manifest.is_object() || manifest.is_array());
}

#[test]
fn augment_thread_count_does_not_change_output() {
    let dir = TempDir::new().unwrap();
    let one = dir.path().join("one");
    let four = dir.path().join("four");
    for (t, out) in [("1", &one), ("4", &four)] {
        ok(&["--threads", t, "augment", s(&corpus()), "--n-pos", "3", "--n-neg", "3", "--out", s(out)]);
    }
    assert_eq!(fs::read(one.join("manifest.json")).unwrap(), fs::read(four.join("manifest.json")).unwrap());
}

#[test]
fn pretrain_eval_embed_pipeline() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let ds = small_dataset(p, "ds", "1");
    let cfg = p.join("run.toml");
    fs::write(&cfg, "seed = 2\n[encoder]\nhidden = 8\ndepth = 1\n[train]\nepochs = 2\nbatch_size = 64\n").unwrap();

    let ck = p.join("ck.json");
    ok(&["--config", s(&cfg), "pretrain", s(&ds), "--out", s(&ck), "--metrics", s(&p.join("m1.csv"))]);
    ok(&["--config", s(&cfg), "pretrain", s(&ds), "--out", s(&p.join("ck2.json")), "--metrics", s(&p.join("m2.csv"))]);
    let m1 = fs::read_to_string(p.join("m1.csv")).unwrap();
    assert_eq!(m1, fs::read_to_string(p.join("m2.csv")).unwrap());
    assert_eq!(fs::read(&ck).unwrap(), fs::read(p.join("ck2.json")).unwrap());
    assert_eq!(m1.lines().count(), 3);

    let rel = p.join("rel.json");
    let out = ok(&["eval-relations", s(&ds), "--ckpt", s(&ck), "--out", s(&rel)]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("positive") && table.contains("negative"));
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(rel).unwrap()).unwrap();
    assert!(stats["pos_pairs"].as_u64().unwrap() > 0);

    let emb = p.join("emb.csv");
    ok(&["embed", s(&corpus().join("inverter.sp")), s(&ds), "--ckpt", s(&ck), "--out", s(&emb)]);
    let text = fs::read_to_string(emb).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 3 + 8);
    assert_eq!(text.lines().count(), 2 + 12 * 9);
}

#[test]
fn untrained_checkpoint_evaluates() {
    let dir = TempDir::new().unwrap();
    let ds = small_dataset(dir.path(), "ds", "1");
    let ck = dir.path().join("ck0.json");
    ok(&["pretrain", s(&ds), "--out", s(&ck), "--epochs", "0"]);
    let out = ok(&["eval-relations", s(&ds), "--ckpt", s(&ck)]);
    assert!(String::from_utf8(out.stdout).unwrap().lines().count() == 4);
}

#[test]
fn regression_task_metrics_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let sur = p.join("sur");
    ok(&["surrogate", "--rows", "30", "--out", s(&sur)]);
    let csv = sur.join("data.csv");
    let args = |out: &Path| {
        vec![
            "train-task".to_string(),
            "2".into(),
            "--data".into(),
            s(&csv).into(),
            "--depths".into(),
            "0,1,1".into(),
            "--hidden".into(),
            "8".into(),
            "--epochs".into(),
            "3".into(),
            "--batch-size".into(),
            "8".into(),
            "--out".into(),
            s(out).into(),
        ]
    };
    let (a, b) = (p.join("a.json"), p.join("b.json"));
    for out in [&a, &b] {
        let v = args(out);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    assert_eq!(v["task"], "task2");
    assert_eq!(v["metrics"]["test_r2"].as_array().unwrap().len(), 2);

    let three = run(&["train-task", "3", "--data", s(&csv), "--depths", "0,1,1", "--out", s(&p.join("c.json"))]);
    assert_eq!(three.status.code(), Some(1));
}

#[test]
fn task1_with_frozen_branch() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let ds = small_dataset(p, "ds", "1");
    let cfg = p.join("run.toml");
    fs::write(&cfg, "[encoder]\nhidden = 8\ndepth = 1\n").unwrap();
    let ck = p.join("ck.json");
    ok(&["--config", s(&cfg), "pretrain", s(&ds), "--out", s(&ck), "--epochs", "1"]);
    let out = p.join("t1.json");
    ok(&["train-task", "1", "--ckpt", s(&ck), "--depths", "1,0,0", "--hidden", "8", "--epochs", "3", "--out", s(&out)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let acc = v["metrics"]["test_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let wrong = run(&["train-task", "1", "--ckpt", s(&ck), "--depths", "2,0,0", "--out", s(&out)]);
    assert_eq!(wrong.status.code(), Some(3));
}
