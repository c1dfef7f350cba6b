use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

use patternlens_cli::config::PipelineConfig;

fn tiny_config() -> Value {
    json!({
        "seed": 3,
        "split": { "ratios": [0.7, 0.15, 0.15], "seed": 3 },
        "classifier": { "h1": 16, "h2": 8, "epochs": 3, "lr_max": 3e-3, "seed": 3 },
        "targets": { "source": "planted" },
        "transcoders": { "members": 2, "seed": 3, "model": { "latent": 32, "k": 4, "lr": 3e-3, "epochs": 20 } },
        "discover": { "probe_size": 400, "probe_seed": 3, "consistency_threshold": 0.0 },
        "annotate": { "client": "mock", "auto_accept": true },
        "head": { "alpha": 0.01, "seed": 3 },
        "synth": {
            "n_factors": 16, "d_img": 16, "d_txt": 16, "target_dim": 8, "k_true": 2,
            "noise_sigma": 0.0, "label_rules": [[0, 1], [2, 3]], "label_names": ["left", "right"],
            "n_samples": 800, "n_patients": 200, "seed": 3
        }
    })
}

fn run(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patternlens"))
        .arg("--store")
        .arg(store)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(store: &Path, args: &[&str]) -> String {
    let out = run(store, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, v: &Value) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn unknown_subcommand_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["frobnicate"]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_prerequisite_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    for (args, stage) in [
        (&["split"][..], "`ingest`"),
        (&["encode"][..], "`split`"),
        (&["explain", "--record", "r1", "--target", "0"][..], "`encode`"),
        (&["discover"][..], "`split`"),
    ] {
        let out = run(&store, args);
        assert_eq!(out.status.code(), Some(3), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(stage), "{args:?}: {err}");
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let mut bad = tiny_config();
    bad["head"]["alpah"] = json!(1.0);
    let cfg = write_config(dir.path(), &bad);
    let out = run(&store, &["--config", &cfg, "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpah"));

    let cfg = write_config(dir.path(), &tiny_config());
    let out = run(&store, &["--config", &cfg, "split", "--ratios", "0.5", "0.5", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&store, &["--config", "/no/such/config.json", "synth"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stages_run_one_by_one() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let cfg = write_config(dir.path(), &tiny_config());
    ok(&store, &["--config", &cfg, "synth"]);
    // later stages read the echoed config from the store
    let echoed = PipelineConfig::load(&store.join("config.json")).unwrap();
    assert_eq!(
        echoed,
        PipelineConfig::from_json(tiny_config().to_string().as_bytes()).unwrap()
    );

    ok(&store, &["split"]);
    let acc: Value = serde_json::from_str(&ok(&store, &["train-classifier"])).unwrap();
    assert_eq!(acc["test_accuracy"].as_array().unwrap().len(), 2);
    ok(&store, &["extract"]);
    ok(&store, &["train-transcoders"]);
    let report: Value = serde_json::from_str(&ok(&store, &["discover"])).unwrap();
    assert!(report["patterns"].as_u64().unwrap() > 0);

    let again = run(&store, &["discover"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));

    ok(&store, &["annotate"]);
    ok(&store, &["thresholds"]);
    let enc: Value = serde_json::from_str(&ok(&store, &["encode"])).unwrap();
    assert!(enc["max_active"].as_u64().unwrap() <= 30);
    let evals: Value = serde_json::from_str(&ok(&store, &["train-head", "--alpha", "0.02"])).unwrap();
    assert_eq!(evals.as_array().unwrap().len(), 2);
    let echoed = PipelineConfig::load(&store.join("config.json")).unwrap();
    assert_eq!(echoed.head.alpha, 0.02);

    for stage in [
        "synth",
        "split",
        "train-classifier",
        "extract",
        "train-transcoders",
        "discover",
        "annotate",
        "thresholds",
        "encode",
        "train-head",
    ] {
        let m: Value =
            serde_json::from_slice(&std::fs::read(store.join("stages").join(format!("{stage}.json"))).unwrap())
                .unwrap();
        assert_eq!(m["stage"], stage);
        assert!(m["outputs"].as_object().is_some_and(|o| !o.is_empty()), "{stage}");
    }

    let ds = patternlens::embedstore::Dataset::load(&store.join("dataset")).unwrap();
    let rid = ds.records[0].record_id.clone();
    let report: Value = serde_json::from_str(&ok(&store, &["explain", "--record", &rid, "--target", "right"])).unwrap();
    let parts: f64 = report["contributions"]
        .as_array()
        .unwrap()
        .iter()
        .fold(report["bias"].as_f64().unwrap(), |acc, c| {
            acc + c["contribution"].as_f64().unwrap()
        });
    assert_eq!(parts, report["logit"].as_f64().unwrap());
    let out = run(&store, &["explain", "--record", "nope", "--target", "right"]);
    assert_eq!(out.status.code(), Some(3));

    let export = dir.path().join("export");
    ok(&store, &["curate-export", "--out", export.to_str().unwrap()]);
    let exported: Value = serde_json::from_slice(&std::fs::read(&export).unwrap()).unwrap();
    assert!(!exported.as_object().unwrap().is_empty());
}

#[test]
fn e2e_summary_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&a, &["--config", &cfg, "e2e"]);
    ok(&b, &["--config", &cfg, "e2e"]);
    ok(&c, &["--config", &cfg, "--seed", "4", "e2e"]);
    let read = |p: &Path| std::fs::read(p.join("summary.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let s: Value = serde_json::from_slice(&read(&a)).unwrap();
    assert!(s["recovery_rate"].is_number());
    for t in s["targets"].as_array().unwrap() {
        assert!(t["test_accuracy"].is_number());
    }
    assert_eq!(s["max_attribution_residual"], 0.0);
}
