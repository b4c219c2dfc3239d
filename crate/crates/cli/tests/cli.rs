use std::path::Path;
use std::process::{Command, Output};

fn covqc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covqc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small phantoms and networks so every stage finishes in seconds.
const TINY: &str = r#"{
  "data": { "phantom": { "size": 32 }, "target_size": 16, "folds": 2 },
  "baseline": { "input_size": 16, "conv_channels": [2, 2, 2], "fc": [4, 4, 1] },
  "baseline_training": { "epochs": 1, "batch_size": 4 },
  "explainer": { "num_perturbations": 20, "slic": { "n_segments": 8 } },
  "segmenter": { "input_size": 16, "levels": [2, 4] },
  "segmenter_training": { "epochs": 1, "batch_size": 4 }
}"#;

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn help_on_every_subcommand() {
    let top = covqc(&["--help"]);
    assert!(top.status.success());
    for sub in [
        "prepare",
        "train-baseline",
        "explain",
        "train-unet",
        "cascade",
        "evaluate",
    ] {
        assert!(
            stdout(&top).contains(sub),
            "{sub} missing from top-level help"
        );
        let o = covqc(&[sub, "--help"]);
        assert!(o.status.success(), "{sub} --help failed: {}", stderr(&o));
        let text = stdout(&o);
        assert!(
            text.contains("--out") && text.contains("--task"),
            "{sub}: {text}"
        );
    }
    let prep = stdout(&covqc(&["prepare", "--help"]));
    for flag in ["--phantom", "--in", "--seed", "--folds", "--config"] {
        assert!(prep.contains(flag), "prepare lacks {flag}");
    }
    assert!(stdout(&covqc(&["evaluate", "--help"])).contains("--mode"));
    assert!(stdout(&covqc(&["train-baseline", "--help"])).contains("--cv"));
}

#[test]
fn prepare_counts_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().to_string_lossy().into_owned();
    let mut hashes = Vec::new();
    for run in ["a", "b", "a"] {
        let o = covqc(&[
            "prepare",
            "--phantom",
            "200",
            "--seed",
            "7",
            "--config",
            &cfg,
            "--out",
            &out,
            "--run-id",
            run,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(summary["volumes"], 200);
        assert_eq!(summary["triplets"]["apex"], 400);
        assert_eq!(summary["triplets"]["basal"], 400);
        hashes.push(summary["manifest_sha256"].as_str().unwrap().to_string());
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_eq!(hashes[0], hashes[2]);
    assert!(dir.path().join("runs/a/run.json").is_file());
    assert!(dir.path().join("runs/a/dataset/manifest.jsonl").is_file());
}

#[test]
fn seven_slice_volume_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("short.raw");
    std::fs::write(&raw, vec![0u8; 7 * 16 * 16 * 4]).unwrap();
    std::fs::write(dir.path().join("short.json"), r#"{"shape": [7, 16, 16]}"#).unwrap();
    let out = dir.path().join("out");
    let o = covqc(&[
        "prepare",
        "--in",
        &raw.to_string_lossy(),
        "--out",
        &out.to_string_lossy(),
    ]);
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("SliceCountOutOfRange"),
        "{}",
        stderr(&o)
    );
    assert!(!out.join("runs/run/run.json").exists());
}

#[test]
fn stages_name_the_missing_prior_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().to_string_lossy().into_owned();
    let base = ["--out", out.as_str(), "--task", "apex"];
    let with = |stage: &[&str]| {
        let mut v: Vec<&str> = stage.to_vec();
        v.extend(base);
        covqc(&v)
    };

    let o = with(&["train-baseline"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("`prepare`"), "{}", stderr(&o));

    let o = covqc(&["prepare", "--phantom", "8", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = with(&["explain"]);
    assert!(stderr(&o).contains("`train-baseline`"), "{}", stderr(&o));

    let o = with(&["train-baseline"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = with(&["evaluate", "--mode", "cascade"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("MissingArtifact"));
    assert!(stderr(&o).contains("`train-unet`"), "{}", stderr(&o));

    let o = with(&["train-unet"]);
    assert!(stderr(&o).contains("`explain`"), "{}", stderr(&o));

    let o = with(&["evaluate", "--mode", "baseline"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(
        &std::fs::read(dir.path().join("runs/run/report/report.json")).unwrap(),
    )
    .unwrap();
    let summary = &report["reports"][0]["summary"];
    for m in ["accuracy", "precision", "recall", "f_measure", "auc"] {
        assert!(summary[m]["mean"].is_number(), "{m} missing");
    }
}

#[test]
fn bad_mode_is_a_usage_error() {
    let o = covqc(&["evaluate", "--mode", "sideways"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("sideways"));
}

#[test]
fn six_stage_pipeline_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    // enough baseline epochs for the training folds to contain true positives
    std::fs::write(
        &cfg,
        TINY.replace(
            "\"epochs\": 1, \"batch_size\": 4 },\n  \"explainer\"",
            "\"epochs\": 8, \"batch_size\": 4 },\n  \"explainer\"",
        ),
    )
    .unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    let stages: [&[&str]; 7] = [
        &[
            "prepare",
            "--phantom",
            "20",
            "--config",
            &cfg.to_string_lossy(),
        ],
        &["train-baseline"],
        &["explain"],
        &["train-unet"],
        &["cascade"],
        &["evaluate", "--mode", "cascade"],
        &["evaluate", "--mode", "baseline"],
    ];
    for stage in stages {
        let mut args = stage.to_vec();
        args.extend(["--out", out.as_str(), "--task", "apex"]);
        let o = covqc(&args);
        assert!(o.status.success(), "{stage:?}: {}", stderr(&o));
    }
    let report_dir = dir.path().join("runs/run/report");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(report_dir.join("report.json")).unwrap()).unwrap();
    let modes: Vec<&str> = report["reports"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["mode"].as_str().unwrap())
        .collect();
    assert_eq!(modes, ["baseline", "cascade"]);
    for r in report["reports"].as_array().unwrap() {
        for m in ["accuracy", "precision", "recall", "f_measure", "auc"] {
            assert!(r["summary"][m]["mean"].is_number(), "{m} missing");
        }
    }
    assert!(report_dir.join("apex-cascade/roc_fold0.png").is_file());
    assert!(report_dir.join("tables.csv").is_file());
}
