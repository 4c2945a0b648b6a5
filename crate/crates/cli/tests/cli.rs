use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_DATA: &str = r#"{"tasks":[
  {"name":"a","classes":2,"train":48,"val":16,"test":24,"metric":{"kind":"macro_f1"}},
  {"name":"b","classes":3,"train":32,"val":16,"test":24,"metric":{"kind":"macro_recall"}}],
  "redundant_dims":6}"#;

const SMALL_TRAIN: &str =
    r#""epochs":2,"patience":1,"batch_size":16,"lr":0.01,"model":{"hidden":[12],"repr_dim":6}"#;

fn infomtl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infomtl"))
        .args(args)
        .current_dir(dir)
        .env("INFOMTL_OUT", dir.join("out"))
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn with_data() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("syn.json"), SMALL_DATA).unwrap();
    ok(&infomtl(
        dir.path(),
        &["gen-data", "--config", "syn.json", "--out", "data"],
    ));
    dir
}

fn train_args(extra: &[&'static str]) -> Vec<&'static str> {
    let mut v = vec![
        "train",
        "--data",
        "data/manifest.json",
        "--epochs",
        "2",
        "--patience",
        "1",
        "--batch-size",
        "16",
        "--lr",
        "0.01",
        "--hidden",
        "12",
        "--repr-dim",
        "6",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn gen_data_is_reproducible_and_uses_the_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(&infomtl(dir.path(), &["gen-data", "--seed", "3"]));
    assert!(first.contains("sentiment") && first.contains("dataset:"));
    let root = dir.path().join("out/data");
    let before: Vec<(String, Vec<u8>)> = {
        let mut v: Vec<_> = fs::read_dir(&root)
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| {
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    fs::read(&p).unwrap(),
                )
            })
            .collect();
        v.sort();
        v
    };
    assert_eq!(before.len(), 6 * 3 + 2);
    ok(&infomtl(dir.path(), &["gen-data", "--seed", "3"]));
    for (name, bytes) in &before {
        assert_eq!(&fs::read(root.join(name)).unwrap(), bytes, "{name}");
    }
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.json"),
        r#"{"shared_dims": 4, "colour": "red"}"#,
    )
    .unwrap();
    let out = infomtl(dir.path(), &["gen-data", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    fs::write(dir.path().join("zero.json"), r#"{"tasks": [{"name": "a", "classes": 1, "train": 4, "val": 2, "test": 2, "metric": {"kind": "macro_f1"}}]}"#).unwrap();
    assert_eq!(
        infomtl(dir.path(), &["gen-data", "--config", "zero.json"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        infomtl(dir.path(), &["train", "--mode", "mgda"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        infomtl(dir.path(), &["no-such-command"]).status.code(),
        Some(1)
    );
}

#[test]
fn train_then_evaluate_stress_and_diagnose() {
    let dir = with_data();
    let d = dir.path();
    let args = train_args(&[
        "--mode", "infomtl", "--alpha", "0.1", "--beta", "0.01", "--tau", "1", "--seed", "1",
    ]);
    let stdout = ok(&infomtl(d, &args));
    assert!(stdout.contains("run: "));
    let run = d.join("out/infomtl/seed1");
    for f in [
        "config.json",
        "metrics.jsonl",
        "summary.json",
        "data.json",
        "checkpoint/manifest.json",
        "reprs/manifest.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let test_scores: Vec<f64> = summary["test_scores"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()))
        .collect();

    ok(&infomtl(d, &["eval", "--run", "out/infomtl/seed1"]));
    let eval = fs::read_to_string(run.join("eval_test.csv")).unwrap();
    assert!(eval.starts_with("task,metric,score\n"));

    ok(&infomtl(
        d,
        &[
            "robustness",
            "--run",
            "out/infomtl/seed1",
            "--strengths",
            "0,0.5,2",
        ],
    ));
    for kind in ["gaussian", "fgm"] {
        let csv = fs::read_to_string(run.join(format!("robust_{kind}.csv"))).unwrap();
        let anchor: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .filter(|c| c[3] == "0")
            .map(|c| c[5].parse().unwrap())
            .collect();
        assert_eq!(anchor.len(), test_scores.len());
        for (a, b) in anchor.iter().zip(&test_scores) {
            assert!((a - b).abs() < 1e-4, "{kind}: {a} vs {b}");
        }
    }

    ok(&infomtl(d, &["diagnose", "--run", "out/infomtl/seed1"]));
    let mi = fs::read_to_string(run.join("mi_trajectory.csv")).unwrap();
    assert_eq!(mi.lines().count(), 1 + 3, "header plus epochs 0..=2");
    let diag = fs::read_to_string(run.join("diagnostics.csv")).unwrap();
    for line in diag.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        let u: f64 = c[2].parse().unwrap();
        let ari: f64 = c[3].parse().unwrap();
        assert!(u <= 0.0 && (-1.0..=1.0).contains(&ari));
    }
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["eval", "robustness", "diagnose"] {
        let out = infomtl(dir.path(), &[cmd, "--run", "nowhere"]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
    }
}

#[test]
fn suite_is_byte_reproducible_and_reportable() {
    let dir = with_data();
    let d = dir.path();
    let manifest = format!(
        r#"{{"name":"exp","dataset":{{"manifest":"data/manifest.json"}},"seeds":[0,1],
            "configs":[{{"method":"ew",{SMALL_TRAIN}}},{{"method":"infomtl",{SMALL_TRAIN}}}]}}"#
    );
    fs::write(d.join("exp.json"), manifest).unwrap();
    ok(&infomtl(
        d,
        &["suite", "--manifest", "exp.json", "--jobs", "2"],
    ));
    let exp = d.join("out/exp");
    let report = fs::read(exp.join("report.csv")).unwrap();
    let summary = fs::read(exp.join("runs/1/infomtl/seed1/summary.json")).unwrap();
    ok(&infomtl(
        d,
        &["suite", "--manifest", "exp.json", "--sequential"],
    ));
    assert_eq!(fs::read(exp.join("report.csv")).unwrap(), report);
    assert_eq!(
        fs::read(exp.join("runs/1/infomtl/seed1/summary.json")).unwrap(),
        summary
    );

    let text = String::from_utf8(report).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert!(header.contains(&"avg") && header.contains(&"delta_p"));
    let ew = text.lines().find(|l| l.starts_with("ew,")).unwrap();
    assert!(ew.ends_with(",0.0000"));

    ok(&infomtl(d, &["report", "out/exp/runs", "--out", "rep"]));
    assert_eq!(fs::read_to_string(d.join("rep/report.csv")).unwrap(), text);
    ok(&infomtl(
        d,
        &["report", "out/exp/runs/1/ew/seed0", "--out", "one"],
    ));
    assert_eq!(
        fs::read_to_string(d.join("one/report.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}

#[test]
fn suite_without_ew_rejects_delta_p() {
    let dir = with_data();
    let manifest = format!(
        r#"{{"name":"x","dataset":{{"manifest":"data/manifest.json"}},"configs":[{{"method":"uw",{SMALL_TRAIN}}}]}}"#
    );
    fs::write(dir.path().join("x.json"), manifest).unwrap();
    let out = infomtl(dir.path(), &["suite", "--manifest", "x.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ew"));
}

#[test]
fn report_rejects_conflicting_method_names() {
    let dir = with_data();
    let d = dir.path();
    ok(&infomtl(
        d,
        &train_args(&["--mode", "ew", "--name", "m", "--out", "runs/a"]),
    ));
    ok(&infomtl(
        d,
        &train_args(&[
            "--mode", "uw", "--name", "m", "--seed", "1", "--out", "runs/b",
        ]),
    ));
    assert_eq!(infomtl(d, &["report", "runs"]).status.code(), Some(1));
}

#[test]
fn score_sheet_verification() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("sheet.csv"),
        "method,emotion,hate,irony,offensive,sentiment,stance\n\
         EW,74.37,44.08,65.32,79.04,70.64,63.59\n\
         InfoMTL,76.90,48.44,68.94,79.78,71.92,65.02\n",
    )
    .unwrap();
    let stdout = ok(&infomtl(
        dir.path(),
        &["report", "--score-sheet", "sheet.csv", "--out", "r"],
    ));
    assert!(
        stdout.contains("68.50") && stdout.contains("66.17") && stdout.contains("+3.97"),
        "{stdout}"
    );
}
