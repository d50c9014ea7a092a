use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mlc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlc"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MLC_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = mlc(args, cwd);
    assert!(
        out.status.success(),
        "mlc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Runs a command expected to fail and returns its single stderr line.
fn err(args: &[&str], cwd: &Path) -> String {
    let out = mlc(args, cwd);
    assert!(!out.status.success(), "mlc {args:?} succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    stderr.trim_end().to_string()
}

fn small_dataset(dir: &Path) {
    fs::write(dir.join("spec.json"), r#"{"num_samples": 200}"#).unwrap();
    ok(&["gen-synth", "--spec", "spec.json", "--out", "data"], dir);
}

fn write_config(dir: &Path, head: &str) {
    let cfg = format!(
        r#"{{"model.head": "{head}", "train.epochs": 1,
            "model.backbone.stages": [{{"channels": 8, "stride": 2}}]}}"#
    );
    fs::write(dir.join("cfg.json"), cfg).unwrap();
}

#[test]
fn full_pipeline_produces_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d);
    for f in [
        "train/labels.csv",
        "val/labels.csv",
        "embeddings.txt",
        "spec.json",
    ] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    write_config(d, "decoder+gat");
    ok(
        &[
            "train", "--config", "cfg.json", "--data", "data", "--out", "run",
        ],
        d,
    );
    for f in ["config.json", "train_log.jsonl", "checkpoint.mlck"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let ck = "run/checkpoint.mlck";
    ok(&["calibrate", "--checkpoint", ck, "--data", "data"], d);
    let thr: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/thresholds.json")).unwrap()).unwrap();
    assert_eq!(thr["thresholds"].as_array().unwrap().len(), 10);

    let csv = ok(
        &[
            "eval",
            "--checkpoint",
            ck,
            "--data",
            "data",
            "--thresholds",
            "run/thresholds.json",
        ],
        d,
    );
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "mAP,OF1,OF1-adapt,CF1,CF1-adapt");
    let row: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(row.len(), 5);
    assert!(row.iter().all(|v| (0.0..=1.0).contains(v)), "{row:?}");
    assert!(d.join("run/eval_report.json").exists());

    ok(&["freeze-graph", "--checkpoint", ck], d);
    let frozen: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/frozen_graph.json")).unwrap())
            .unwrap();
    assert!(frozen.is_object());
}

#[test]
fn out_dir_comes_from_flag_then_env_then_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d);
    write_config(d, "plain");
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("cfg.json")).unwrap()).unwrap();
    let mut cfg = cfg.as_object().unwrap().clone();
    cfg.insert("out_dir".into(), "from-config".into());
    fs::write(d.join("cfg.json"), serde_json::to_string(&cfg).unwrap()).unwrap();

    ok(&["train", "--config", "cfg.json", "--data", "data"], d);
    assert!(d.join("from-config/checkpoint.mlck").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_mlc"))
        .args(["train", "--config", "cfg.json", "--data", "data"])
        .current_dir(d)
        .env("MLC_OUT_DIR", "from-env")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("from-env/checkpoint.mlck").exists());

    ok(
        &[
            "train",
            "--config",
            "cfg.json",
            "--data",
            "data",
            "--out",
            "from-flag",
        ],
        d,
    );
    assert!(d.join("from-flag/checkpoint.mlck").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d);
    ok(&["gen-synth", "--spec", "spec.json", "--out", "data2"], d);
    for f in [
        "train/features.bin",
        "train/labels.csv",
        "train/manifest.json",
        "embeddings.txt",
    ] {
        assert_eq!(
            fs::read(d.join("data").join(f)).unwrap(),
            fs::read(d.join("data2").join(f)).unwrap(),
            "{f}"
        );
    }
    write_config(d, "decoder");
    for out in ["a", "b"] {
        ok(
            &[
                "train", "--config", "cfg.json", "--data", "data", "--out", out,
            ],
            d,
        );
    }
    for f in ["checkpoint.mlck", "train_log.jsonl", "config.json"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn gradcheck_reports_every_losses_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--module", "losses"], tmp.path());
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2, "{out}");
    assert!(lines.iter().all(|l| l.starts_with("pass losses/")), "{out}");
    assert!(out.contains("100 seeds"));

    let line = err(&["gradcheck", "--module", "nonsense"], tmp.path());
    assert!(line.starts_with("error[config]:"), "{line}");
}

#[test]
fn loss_curves_csv_has_expected_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["loss-curves"], tmp.path());
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), "cos,pos_part,neg_part");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 201);
    assert_eq!(rows[0][0], -1.0);
    assert_eq!(rows[200][0], 1.0);

    ok(&["loss-curves", "--out", "curves"], tmp.path());
    assert_eq!(
        fs::read_to_string(tmp.path().join("curves/loss_curves.csv")).unwrap(),
        out
    );
}

#[test]
fn failures_print_one_tagged_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d);

    fs::write(d.join("bad.json"), r#"{"train.epochz": 3}"#).unwrap();
    let line = err(&["train", "--config", "bad.json", "--data", "data"], d);
    assert!(
        line.starts_with("error[config]:") && line.contains("train.epochz"),
        "{line}"
    );

    let line = err(
        &["eval", "--checkpoint", "missing.mlck", "--data", "data"],
        d,
    );
    assert!(
        line.starts_with("error[io]:") && line.contains("missing.mlck"),
        "{line}"
    );

    fs::remove_file(d.join("data/embeddings.txt")).unwrap();
    write_config(d, "gat");
    let line = err(&["train", "--config", "cfg.json", "--data", "data"], d);
    assert!(line.starts_with("error[missing-embeddings]:"), "{line}");

    let line = err(&["train", "--no-such-flag"], d);
    assert!(line.starts_with("error[usage]:"), "{line}");
    assert!(mlc(&["--help"], d).status.success());
}
