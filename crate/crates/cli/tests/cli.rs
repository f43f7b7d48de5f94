use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cumnet"))
}

fn tiny(out: &Path) -> Value {
    let train = json!({"max_epochs": 3, "batch_size": 8, "lr": 0.05, "momentum": 0.9, "seed": 1});
    json!({
        "seed": 5,
        "output_dir": out,
        "dataset": {"source": "synthetic_glyphs", "classes": 4, "per_class": 16, "test_per_class": 8, "side": 8},
        "architecture": {
            "input_shape": [1, 8, 8],
            "layers": [
                {"type": "conv", "out": 4, "kernel": 3},
                {"type": "batch_norm"},
                {"type": "relu"},
                {"type": "max_pool", "window": 2},
                {"type": "conv", "out": 4, "kernel": 3},
                {"type": "batch_norm"},
                {"type": "relu"},
                {"type": "flatten"},
                {"type": "dense", "out": 2}
            ]
        },
        "curriculum": {
            "stage_classes": [2, 4],
            "stages": [
                {"train": train},
                {"morphs": [{"op": "deepen", "site": {"conv": 0}}], "keep_zero_mask": true, "train": train}
            ]
        },
        "baseline": train,
        "prune_variants": [{"ratio": 0.5, "scope": "per_layer"}],
        "robustness": {"sigmas": [0.0, 0.1], "fractions": [0.0, 0.5], "ablation_trials": 2, "eps": [0.0, 0.05], "deltas": [0.0, 0.5, 1.0]}
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn files_under(dir: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.insert(p);
        }
    }
    out
}

#[test]
fn dry_run_trains_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &tiny(&out));
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("stage"));
    assert!(stdout.contains("baseline"));
    assert!(stdout.contains("config hash"));
    assert!(!out.exists());
}

#[test]
fn conflicting_flag_warns_and_config_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny(&tmp.path().join("out")));
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--dry-run", "--seed", "99"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed 99 ignored"));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tiny(&tmp.path().join("out"));
    let mut unknown = base.clone();
    unknown["surprise"] = json!(1);
    let mut mismatch = base.clone();
    mismatch["curriculum"]["stage_classes"] = json!([2, 3, 4]);
    let mut ratio = base.clone();
    ratio["prune_variants"] = json!([{"ratio": 1.0}]);
    let mut missing = base.clone();
    missing["dataset"] = json!({
        "source": "idx",
        "train_images": "/nonexistent/a", "train_labels": "/nonexistent/b",
        "test_images": "/nonexistent/c", "test_labels": "/nonexistent/d"
    });
    let mut morph_first = base.clone();
    morph_first["curriculum"]["stages"][0]["morphs"] = json!([{"op": "deepen", "site": {"conv": 0}}]);
    for (name, cfg) in [
        ("unknown field", unknown),
        ("stage mismatch", mismatch),
        ("prune ratio", ratio),
        ("missing file", missing),
        ("first-stage morph", morph_first),
    ] {
        let p = write_config(tmp.path(), &cfg);
        let o = run(&["run", "--config", p.to_str().unwrap(), "--dry-run"]);
        assert_eq!(code(&o), 2, "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn io_errors_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["report", "--checkpoint", tmp.path().join("none.mtck").to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    let bad = tmp.path().join("bad.mtck");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = run(&["report", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    let o = run(&["run", "--config", tmp.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(code(&o), 4);
}

#[test]
fn divergence_exits_3_and_keeps_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut cfg = tiny(&out);
    cfg["curriculum"]["stages"][0]["train"]["lr"] = json!(1e30);
    cfg["curriculum"]["stages"][0]["train"]["momentum"] = json!(0.0);
    let p = write_config(tmp.path(), &cfg);
    let o = run(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stdout));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let steps = manifest["steps"].as_array().unwrap();
    let cumulative = steps.iter().find(|s| s["step"] == "cumulative").unwrap();
    assert_eq!(cumulative["status"], "failed");
    let baseline = steps.iter().find(|s| s["step"] == "baseline").unwrap();
    assert_eq!(baseline["status"], "ok");
}

#[test]
fn run_writes_a_complete_manifest_and_repeats_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let p = write_config(tmp.path(), &tiny(&out));
        let o = run(&["run", "--config", p.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("M_cumulative / M_baseline"));
        outputs.push(out);
    }
    let out = &outputs[0];
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["steps"].as_array().unwrap().iter().all(|s| s["status"] == "ok"));
    let listed: BTreeSet<PathBuf> = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| PathBuf::from(f["path"].as_str().unwrap()))
        .collect();
    assert_eq!(listed, files_under(out));
    for name in ["stages.csv", "table1.csv", "table2.csv", "table3.csv", "noise.csv", "detection.svg"] {
        assert!(out.join(name).is_file(), "{name}");
    }

    for f in files_under(out) {
        let rel = f.strip_prefix(out).unwrap();
        let other = outputs[1].join(rel);
        match f.extension().and_then(|e| e.to_str()) {
            Some("mtck") | Some("svg") => {
                assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(&other).unwrap(), "{}", rel.display())
            }
            Some("csv") => {
                let strip = |p: &Path| -> Vec<Vec<String>> {
                    let mut r = csv::Reader::from_path(p).unwrap();
                    let h = r.headers().unwrap().clone();
                    r.records()
                        .map(|rec| {
                            rec.unwrap()
                                .iter()
                                .zip(h.iter())
                                .filter(|(_, k)| *k != "checkpoint" && *k != "wall_time_s")
                                .map(|(v, _)| v.to_string())
                                .collect()
                        })
                        .collect()
                };
                assert_eq!(strip(&f), strip(&other), "{}", rel.display());
            }
            _ => {}
        }
    }
}

#[test]
fn subcommands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &tiny(&out));
    let cfg = cfg.to_str().unwrap();
    let ck = |n: &str| tmp.path().join(n).to_string_lossy().into_owned();

    let o = run(&["split", "--config", cfg]);
    assert_eq!(code(&o), 0);
    assert!(out.join("split.json").is_file());

    let o = run(&["train", "--config", cfg, "--classes", "2", "--out", &ck("s1.mtck")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&[
        "expand", "--checkpoint", &ck("s1.mtck"), "--deepen", "conv:0", "--widen", "conv:2=6", "--classes", "4",
        "--keep-zero-mask", "--out", &ck("s2.mtck"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&["expand", "--checkpoint", &ck("s2.mtck"), "--widen", "dense:0=9", "--out", &ck("x.mtck")]);
    assert_eq!(code(&o), 2, "widening the classifier is refused");

    let o = run(&["prune", "--checkpoint", &ck("s2.mtck"), "--ratio", "0.5", "--scope", "per-layer", "--out", &ck("p.mtck")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&["report", "--checkpoint", &ck("p.mtck")]);
    assert_eq!(code(&o), 0);
    let report = String::from_utf8_lossy(&o.stdout);
    let total = report.lines().find(|l| l.starts_with("total")).unwrap();
    let nums: Vec<u64> = total.split(',').filter_map(|v| v.parse().ok()).collect();
    assert!(nums[1] < nums[0], "zero-aware MACs below dense MACs: {total}");

    let o = run(&["eval", "--config", cfg, "--checkpoint", &ck("s2.mtck")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("noise.csv").is_file() && out.join("ablation.svg").is_file());

    let o = run(&["attack", "--config", cfg, "--checkpoint", &ck("s1.mtck"), "--checkpoint", &ck("s2.mtck")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("table3.csv").is_file());

    let o = run(&["detect", "--config", cfg, "--checkpoint", &ck("s1.mtck"), "--checkpoint", &ck("s2.mtck")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().next().unwrap().contains("tnr_mi 0 fnr_mi 0"));
    assert!(stdout.lines().last().unwrap().contains("tnr_mi 1 fnr_mi 1"));
}
