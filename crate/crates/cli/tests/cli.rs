use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

/// A config small enough that every stage finishes in a second or two.
fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "seed": 3,
        "model": { "n_layers": 2, "d_model": 32, "d_ffn": 64, "n_heads": 4, "max_seq_len": 24 },
        "data": { "n_facts": 24, "n_entities": 12 },
        "pretrain": { "steps": 400, "lr": 0.005, "batch": 16 },
        "analysis": { "n_perm": 100 },
        "selection": { "n_layers_to_suppress": 1 },
        "adapt": { "steps": 10, "batch": 4 },
        "sweep": {
            "lambda_list": [0.0, 1.0],
            "n_list": [1, 2],
            "alpha_beta_list": [[0.5, 0.5]],
            "adapt_steps": 4
        }
    });
    let p = dir.join("tiny.json");
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn pmlab(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmlab"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_or_bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_pmlab"))
        .arg("pretrain")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = pmlab(&dir.path().join("absent.json"), &out, &["pretrain"]);
    assert_eq!(code(&o), 2);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"model": {"n_layerz": 2}}"#).unwrap();
    let o = pmlab(&bad, &out, &["pretrain"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n_layerz"), "{}", stderr(&o));

    let cfg = tiny_config(dir.path());
    for set in [
        "model.d_model=15",
        "adapt.rank=0",
        "selection.n_layers_to_suppress=3",
        "sweep.n_list=[1,5]",
        "data.counterfactual_rate=2",
        "noequals",
    ] {
        let o = pmlab(&cfg, &out, &["pretrain", "--set", set]);
        assert_eq!(code(&o), 2, "--set {set}: {}", stderr(&o));
    }
    assert!(!out.join("model.ckpt").exists());
}

#[test]
fn downstream_stage_without_upstream_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = pmlab(&cfg, &dir.path().join("out"), &["analyze"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("pretrain"), "{}", stderr(&o));
}

#[test]
fn full_pipeline_provenance_and_staleness() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");

    let o = pmlab(&cfg, &out, &["run-all"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "model.ckpt",
        "pretrain_log.csv",
        "pretrain_accuracy.json",
        "benchmark.jsonl",
        "benchmark_stages.csv",
        "benchmark_buckets.csv",
        "activation_ratios.csv",
        "layer_stats.csv",
        "selection.json",
        "intervention.csv",
        "adapter.ckpt",
        "adapt_log.csv",
        "plan.json",
        "report_base_none.csv",
        "report_base_ffn.csv",
        "report_adapted_ffn.json",
        "summary.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    // Every CSV opens with the provenance line; every JSON carries it too.
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    let hash = summary["config_hash"].as_str().unwrap().to_string();
    assert_eq!(summary["seed"], 3);
    for entry in fs::read_dir(&out).unwrap() {
        let p = entry.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if name.ends_with(".csv") {
            let text = fs::read_to_string(&p).unwrap();
            assert_eq!(
                text.lines().next().unwrap(),
                format!("# config_hash={hash} seed=3"),
                "{name}"
            );
        } else if name.ends_with(".json") && !name.ends_with(".meta.json") {
            let v: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
            assert_eq!(v["config_hash"], hash.as_str(), "{name}");
        }
    }
    let stages = fs::read_to_string(out.join("benchmark_stages.csv")).unwrap();
    let count = |stage: &str| -> usize {
        stages
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{stage},")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(count("facts") >= count("elicited") && count("elicited") >= count("retained"));

    // Rerunning a stage reproduces its output byte for byte.
    let before = fs::read(out.join("model.ckpt")).unwrap();
    let o = pmlab(&cfg, &out, &["pretrain"]);
    assert_eq!(code(&o), 0);
    assert_eq!(before, fs::read(out.join("model.ckpt")).unwrap());

    // Evaluate with explicit tags.
    let o = pmlab(
        &cfg,
        &out,
        &["evaluate", "--model-tag", "base", "--plan-tag", "mha"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("report_base_mha.csv").exists());

    let o = pmlab(&cfg, &out, &["sweep"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    // Header comment, column names, 2 + 2 + 1 grid points.
    assert_eq!(sweep.lines().count(), 2 + 5);

    // A config change upstream of analyze makes its inputs stale.
    let o = pmlab(&cfg, &out, &["analyze", "--set", "elicitation.n=7"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("benchmark.jsonl"), "{}", stderr(&o));

    // A hand-edited artifact is caught and named.
    let jsonl = out.join("benchmark.jsonl");
    let mut text = fs::read_to_string(&jsonl).unwrap();
    text.push('\n');
    fs::write(&jsonl, text).unwrap();
    let o = pmlab(&cfg, &out, &["analyze"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("benchmark.jsonl"));
    let o = pmlab(&cfg, &out, &["evaluate", "--model-tag", "base"]);
    assert_eq!(code(&o), 3);

    // Rebuilding the benchmark clears it.
    let o = pmlab(&cfg, &out, &["build-benchmark"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = pmlab(&cfg, &out, &["analyze"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn seed_flag_changes_everything_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&pmlab(&cfg, &a, &["pretrain"])), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_pmlab"))
        .args(["pretrain", "--seed", "4", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&b)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_ne!(
        fs::read(a.join("model.ckpt")).unwrap(),
        fs::read(b.join("model.ckpt")).unwrap()
    );
    let first = fs::read_to_string(b.join("pretrain_log.csv")).unwrap();
    assert!(first.starts_with("# config_hash=") && first.lines().next().unwrap().ends_with("seed=4"));
}
