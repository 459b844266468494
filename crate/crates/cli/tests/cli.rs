use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sammil_core::io::{read_dataset_manifest, write_slide};
use sammil_core::synth::synthesize;
use serde_json::{json, Value};
use tempfile::TempDir;

fn sammil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sammil"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    path
}

fn toy_spec() -> Value {
    json!({
        "name": "toy",
        "n_slides": 24,
        "instances_per_slide": [10, 16],
        "feature_dim": 8,
        "n_categories": 3,
        "positive_slide_fraction": 0.5,
        "tumor_instance_fraction": 0.3,
        "redundancy_skew": 1.5,
        "noise_sigma": 0.1,
        "seed": 3
    })
}

fn toy_config() -> Value {
    json!({
        "dims": {"d_in": 8, "d": 8, "h": 4, "c": 2},
        "epochs": 25,
        "patience": 25,
        "lr": 0.01,
        "seed": 1
    })
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A synthetic dataset under `tmp/data`.
fn dataset(tmp: &TempDir) -> PathBuf {
    let spec = write(tmp.path(), "spec.json", &toy_spec());
    let data = tmp.path().join("data");
    let o = sammil(&["synth", p(&spec), "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    data
}

#[test]
fn synth_writes_a_dataset_and_refuses_to_overwrite() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp);
    let manifest = read_dataset_manifest(&data).unwrap();
    assert_eq!(manifest.slides.len(), 24);
    assert_eq!(manifest.slides.iter().filter(|s| s.label == 1).count(), 12);

    let spec = tmp.path().join("spec.json");
    let again = sammil(&["synth", p(&spec), "--out", p(&data)]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("already exists"));
    assert_eq!(
        code(&sammil(&["synth", p(&spec), "--out", p(&data), "--force"])),
        0
    );
}

#[test]
fn synth_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let spec = write(tmp.path(), "spec.json", &toy_spec());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        assert_eq!(
            code(&sammil(&[
                "synth",
                p(&spec),
                "--out",
                p(dir),
                "--seed",
                "11"
            ])),
            0
        );
    }
    let read = |d: &Path, rel: &str| fs::read(d.join(rel)).unwrap();
    assert_eq!(read(&a, "dataset.json"), read(&b, "dataset.json"));
    assert_eq!(
        read(&a, "slides/slide_0005/features.bin"),
        read(&b, "slides/slide_0005/features.bin")
    );
}

#[test]
fn malformed_spec_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, "{ not json").unwrap();
    let o = sammil(&["synth", p(&spec), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("spec.json"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&sammil(&["frobnicate"])), 1);
    assert_eq!(code(&sammil(&["train"])), 1);
    assert_eq!(code(&sammil(&["--help"])), 0);
}

#[test]
fn dry_run_prints_the_resolved_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "cfg.json", &json!({"alpha": 0.25}));
    let o = sammil(&[
        "train",
        "missing-dir",
        "--config",
        p(&cfg),
        "--seed",
        "9",
        "--dry-run",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let printed: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(printed["alpha"], 0.25);
    assert_eq!(printed["seed"], 9);
    for key in [
        "mr_target",
        "m",
        "beta",
        "lr",
        "weight_decay",
        "patience",
        "ratio_fn",
        "strategy",
        "dims",
    ] {
        assert!(printed.get(key).is_some(), "{key} missing");
    }
    assert!(fs::read_dir(tmp.path()).unwrap().count() == 1);
}

#[test]
fn missing_dataset_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("no-such-dataset");
    let o = sammil(&["train", p(&missing), "--out", p(&tmp.path().join("run"))]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("no-such-dataset"), "{}", stderr(&o));
}

#[test]
fn train_then_eval() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp);
    let cfg = write(tmp.path(), "cfg.json", &toy_config());
    let run = tmp.path().join("run");
    let o = sammil(&[
        "train",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&run),
        "--dump-masks",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for fold in 0..3 {
        let dir = run.join(format!("fold_{fold}"));
        let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("epoch,cls,pseudo,consistency,total,val_auc\n"));
        assert!(metrics.lines().count() >= 2);
        for file in [
            "checkpoint.bin",
            "report.json",
            "test.json",
            "scores.csv",
            "masks.jsonl",
        ] {
            assert!(dir.join(file).is_file(), "{file}");
        }
    }
    assert!(run.join("summary.json").is_file());

    let ckpt = run.join("fold_0/checkpoint.bin");
    let first = sammil(&["eval", p(&ckpt), p(&data)]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let second = sammil(&["eval", p(&ckpt), p(&data)]);
    assert_eq!(first.stdout, second.stdout);
    let result: Value = serde_json::from_str(&stdout(&first)).unwrap();
    assert!(result["auc"].as_f64().unwrap() > 0.95, "{result}");

    let out = tmp.path().join("eval");
    assert_eq!(
        code(&sammil(&["eval", p(&ckpt), p(&data), "--out", p(&out)])),
        0
    );
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 25);
    assert!(scores.starts_with("slide_id,label,score,attention"));
}

#[test]
fn train_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp);
    let mut cfg = toy_config();
    cfg["epochs"] = json!(4);
    let cfg = write(tmp.path(), "cfg.json", &cfg);
    let runs = [tmp.path().join("r1"), tmp.path().join("r2")];
    for r in &runs {
        assert_eq!(
            code(&sammil(&[
                "train",
                p(&data),
                "--config",
                p(&cfg),
                "--out",
                p(r)
            ])),
            0
        );
    }
    for rel in [
        "fold_1/checkpoint.bin",
        "fold_1/metrics.csv",
        "summary.json",
    ] {
        assert_eq!(
            fs::read(runs[0].join(rel)).unwrap(),
            fs::read(runs[1].join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn eval_reports_dimension_mismatch() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp);
    let mut cfg = toy_config();
    cfg["epochs"] = json!(1);
    let cfg = write(tmp.path(), "cfg.json", &cfg);
    let run = tmp.path().join("run");
    assert_eq!(
        code(&sammil(&[
            "train",
            p(&data),
            "--config",
            p(&cfg),
            "--out",
            p(&run)
        ])),
        0
    );

    let mut spec = toy_spec();
    spec["feature_dim"] = json!(5);
    let spec = write(tmp.path(), "spec5.json", &spec);
    let other = tmp.path().join("data5");
    assert_eq!(code(&sammil(&["synth", p(&spec), "--out", p(&other)])), 0);
    let o = sammil(&["eval", p(&run.join("fold_0/checkpoint.bin")), p(&other)]);
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("d_in 8") && stderr(&o).contains("feature_dim 5"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp);
    let bad = tmp.path().join("bad.bin");
    fs::write(&bad, b"not a model").unwrap();
    let o = sammil(&["eval", p(&bad), p(&data)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.bin"), "{}", stderr(&o));
}

fn bench_grid(strategies: Value, include_baseline: bool) -> Value {
    let mut spec = toy_spec();
    spec["n_slides"] = json!(18);
    json!({
        "dataset": {"synthetic": spec},
        "strategies": strategies,
        "seeds": [0, 1],
        "eval_folds": [0],
        "include_baseline": include_baseline,
        "base": {"dims": {"d_in": 8, "d": 4, "h": 3, "c": 2}, "epochs": 2}
    })
}

#[test]
fn bench_counts_rows_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let grid = write(
        tmp.path(),
        "grid.json",
        &bench_grid(json!(["sg2m", "full_random"]), false),
    );
    let (a, b) = (tmp.path().join("a.csv"), tmp.path().join("b.csv"));
    for out in [&a, &b] {
        let o = sammil(&["bench", p(&grid), "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let csv = fs::read_to_string(&a).unwrap();
    assert_eq!(csv, fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "config,fold,seed,auc,f1,acc");
    assert_eq!(lines.len(), 1 + 4 + 2);
    assert_eq!(lines.iter().filter(|l| l.contains(",all,all,")).count(), 2);
    assert!(lines[6].contains('±'));
    assert_eq!(code(&sammil(&["bench", p(&grid), "--out", p(&a)])), 1);
}

#[test]
fn bench_labels_the_baseline() {
    let tmp = TempDir::new().unwrap();
    let grid = write(tmp.path(), "grid.json", &bench_grid(json!(["sg2m"]), true));
    let out = tmp.path().join("bench.csv");
    let o = sammil(&["bench", p(&grid), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("baseline,all,all,")));
}

#[test]
fn bench_cap_is_enforced() {
    let tmp = TempDir::new().unwrap();
    let mut g = bench_grid(json!(["sg2m", "full_random"]), true);
    g["cap"] = json!(5);
    let grid = write(tmp.path(), "grid.json", &g);
    let o = sammil(&["bench", p(&grid), "--out", p(&tmp.path().join("x.csv"))]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("cap"));
}

#[test]
fn gradcheck_passes_fails_and_rejects() {
    let ok = sammil(&["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let report: Value = serde_json::from_str(&stdout(&ok)).unwrap();
    assert_eq!(report["passed"], true);

    let bad = sammil(&["gradcheck", "--corrupt"]);
    assert_eq!(code(&bad), 3);
    assert!(stderr(&bad).contains("w_proj"));

    assert_eq!(code(&sammil(&["gradcheck", "--h", "0"])), 1);
    assert_eq!(code(&sammil(&["gradcheck", "--dims", "4,4"])), 1);
}

#[test]
fn convert_imports_adapter_output() {
    let tmp = TempDir::new().unwrap();
    let spec: sammil_core::synth::SynthSpec = serde_json::from_value(toy_spec()).unwrap();
    let bags = synthesize(&spec).unwrap().slides;
    let adapter = tmp.path().join("adapter");
    for b in &bags[..6] {
        write_slide(b, &adapter.join(format!("out_{}", b.slide_id)), false).unwrap();
    }
    let single = tmp.path().join("single");
    write_slide(&bags[6], &single, false).unwrap();

    let out = tmp.path().join("converted");
    let o = sammil(&["convert", p(&adapter), p(&single), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = read_dataset_manifest(&out).unwrap();
    assert_eq!(manifest.name, "converted");
    assert_eq!(manifest.slides.len(), 7);
    assert_eq!(manifest.feature_dim, 8);
    let loaded = sammil_core::io::load_slides(&out, &manifest).unwrap();
    for b in &loaded {
        let original = bags.iter().find(|o| o.slide_id == b.slide_id).unwrap();
        assert_eq!(b, original);
    }
    assert!(fs::read_to_string(out.join("dataset.csv"))
        .unwrap()
        .starts_with("slide_id,path,label,fold"));

    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = sammil(&["convert", p(&empty), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 2);
}
