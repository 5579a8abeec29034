use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fairpen"));
    c.env_remove("FAIRPEN_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn fairpen")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let path = dir.join(format!("d{n}_{seed}.csv"));
    ok(&[
        "synth",
        "--epsilon",
        "0.1",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&path),
    ]);
    path
}

fn train(data: &Path, model: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--label",
        "Y",
        "--protected",
        "A",
        "--out",
        s(model),
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn synth_writes_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth(dir.path(), 100, 3);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("A,X2,Y"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 100);
    for r in rows {
        assert!(r.split(',').all(|v| v == "0" || v == "1"), "{r}");
    }
}

#[test]
fn vanilla_train_predicts_protected_bit() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4000, 7);
    let model = dir.path().join("m.json");
    let out = train(&data, &model, &["--no-standardize"]);
    let v = json(&out);
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((0.87..=0.93).contains(&acc), "{acc}");
    assert!(v["d_fpr"].as_f64().unwrap() >= 0.9);
    assert!(v["d_fnr"].as_f64().unwrap() >= 0.9);
    for key in ["accuracy", "d_fpr", "d_fnr", "fpr_0", "fpr_1", "fnr_0", "fnr_1", "n"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["n"].as_u64(), Some(4000));
}

#[test]
fn training_is_byte_reproducible_and_eval_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1500, 8);
    let (m1, m2) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let extra = ["--c1", "50", "--c2", "50", "--q", "0.5", "--kind", "avd"];
    let t1 = train(&data, &m1, &extra);
    train(&data, &m2, &extra);
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());

    let e = ok(&["eval", "--model", s(&m1), "--data", s(&data)]);
    assert_eq!(json(&t1), json(&e));
}

#[test]
fn negative_regularization_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 50, 1);
    let model = dir.path().join("m.json");
    let out = run(&[
        "train",
        "--data",
        s(&data),
        "--label",
        "Y",
        "--protected",
        "A",
        "--q",
        "-1",
        "--out",
        s(&model),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!model.exists());

    let out = run(&["train", "--data", s(&data), "--protected", "A", "--out", s(&model)]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[
        "synth",
        "--epsilon",
        "0.3",
        "--n",
        "10",
        "--out",
        s(&dir.path().join("x.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn load_failure_exits_one_and_names_stage() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = run(&[
        "train",
        "--data",
        s(&missing),
        "--label",
        "Y",
        "--protected",
        "A",
        "--out",
        s(&dir.path().join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("load failed"), "{err}");

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "A,X2,Y\n0,1,1\n1,abc,0\n").unwrap();
    let out = run(&[
        "train",
        "--data",
        s(&bad),
        "--label",
        "Y",
        "--protected",
        "A",
        "--out",
        s(&dir.path().join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("load failed"));
}

#[test]
fn tampered_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 200, 2);
    let model = dir.path().join("m.json");
    train(&data, &model, &[]);
    let mut v: Value = serde_json::from_slice(&std::fs::read(&model).unwrap()).unwrap();
    v["schema"]["label_column"] = Value::from("X2");
    std::fs::write(&model, serde_json::to_vec(&v).unwrap()).unwrap();
    let out = run(&["eval", "--model", s(&model), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn postprocess_with_loose_target_keeps_classifier() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1000, 4);
    let model = dir.path().join("m.json");
    let t = train(&data, &model, &[]);
    let flips = dir.path().join("flips.json");
    let out = ok(&[
        "postprocess",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--target",
        "1",
        "--out",
        s(&flips),
    ]);
    let v: Value = serde_json::from_slice(&std::fs::read(&flips).unwrap()).unwrap();
    for key in ["flip_pos_to_neg", "flip_neg_to_pos"] {
        assert_eq!(v[key], serde_json::json!([0.0, 0.0]), "{key}");
    }
    assert_eq!(json(&out)["accuracy"], json(&t)["accuracy"]);
}

#[test]
fn postprocess_to_zero_target_equalizes() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2000, 5);
    let model = dir.path().join("m.json");
    train(&data, &model, &[]);
    let out = ok(&[
        "postprocess",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--target",
        "0",
        "--seed",
        "3",
        "--out",
        s(&dir.path().join("f.json")),
    ]);
    let v = json(&out);
    assert!(v["d_fpr"].as_f64().unwrap() <= 1e-9);
    assert!(v["d_fnr"].as_f64().unwrap() <= 1e-9);
}

fn sweep(data: &Path, out_dir: &Path, extra: &[&str]) -> Value {
    let mut args = vec![
        "sweep",
        "--data",
        s(data),
        "--label",
        "Y",
        "--protected",
        "A",
        "--out",
        s(out_dir),
        "--q-grid",
        "0.01,1",
        "--folds",
        "3",
    ];
    args.extend_from_slice(extra);
    json(&ok(&args))
}

fn tsv_rows(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("sweep.tsv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(String::from)
        .collect()
}

#[test]
fn sweep_row_count_matches_grid_and_reps() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 600, 9);

    let one = dir.path().join("one");
    let v = sweep(&data, &one, &["--c-grid", "0", "--reps", "1"]);
    assert_eq!(tsv_rows(&one).len(), 1);
    assert_eq!(v["selected_c"], serde_json::json!([0.0]));

    let many = dir.path().join("many");
    sweep(&data, &many, &["--c-grid", "0,10,100", "--reps", "2"]);
    let rows = tsv_rows(&many);
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.split('\t').nth(3) == Some("test")));
    let header = std::fs::read_to_string(many.join("sweep.tsv")).unwrap();
    assert_eq!(
        header.lines().next().unwrap(),
        "rep\tc\tq\tsplit\taccuracy\td_fpr\td_fnr\trelaxed_fp\trelaxed_fn\tobjective"
    );
    let report: Value = serde_json::from_slice(&std::fs::read(many.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["repetitions"].as_array().unwrap().len(), 2);
}

#[test]
fn sweep_grid_must_start_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 200, 9);
    let out = run(&[
        "sweep",
        "--data",
        s(&data),
        "--label",
        "Y",
        "--protected",
        "A",
        "--out",
        s(&dir.path().join("o")),
        "--c-grid",
        "5,10",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_env_var_is_default_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    ok(&["synth", "--n", "50", "--seed", "77", "--out", s(&a)]);
    let out = bin()
        .env("FAIRPEN_SEED", "77")
        .args(["synth", "--n", "50", "--out", s(&b)])
        .output()
        .unwrap();
    assert!(out.status.success());
    ok(&["synth", "--n", "50", "--out", s(&c)]);
    let (a, b, c) = (
        std::fs::read(a).unwrap(),
        std::fs::read(b).unwrap(),
        std::fs::read(c).unwrap(),
    );
    assert_eq!(a, b);
    assert_ne!(a, c);

    let out = bin()
        .env("FAIRPEN_SEED", "x")
        .args(["synth", "--n", "5", "--out", s(&dir.path().join("d.csv"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
