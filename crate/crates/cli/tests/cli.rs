use std::path::Path;
use std::process::{Command, Output};

const DEMO_SPEC: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/demo_spec.json");

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moe-compress"))
        .args(args)
        .current_dir(cwd)
        .env("RFID_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).expect("error line is JSON")
}

#[test]
fn missing_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["calibrate", "--model", "m", "--tokens", "10", "--out", "t.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["compress", "--model", "m", "--trace", "t.json", "--out", "c"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let gen = run(&["gen", "--spec", DEMO_SPEC, "--out", "model"], p);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let echoed: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&gen.stdout).lines().next().unwrap()).unwrap();
    assert_eq!(echoed["config"]["spec"]["n"], 32);

    let cal = run(&["calibrate", "--model", "model", "--tokens", "2000", "--seed", "1", "--out", "trace.json"], p);
    assert!(cal.status.success(), "{}", String::from_utf8_lossy(&cal.stderr));

    let comp = run(
        &[
            "compress", "--model", "model", "--trace", "trace.json", "--ratio", "0.4", "--xi", "0.7", "--k", "4",
            "--residual-frac", "0.03", "--steps", "100", "--out", "compressed",
        ],
        p,
    );
    assert!(comp.status.success(), "{}", String::from_utf8_lossy(&comp.stderr));
    let echoed: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&comp.stdout).lines().next().unwrap()).unwrap();
    assert_eq!(echoed["config"]["pipeline"]["xi"], 0.7);
    assert_eq!(echoed["config"]["pipeline"]["train"]["steps"], 100);

    let eval = run(
        &["eval", "--model", "model", "--compressed", "compressed", "--tokens", "200", "--report", "report.json"],
        p,
    );
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));

    assert!(p.join("model/model.json").is_file());
    assert!(p.join("trace.json").is_file());
    assert!(p.join("compressed/compression.json").is_file());
    assert!(p.join("compressed/proj/up.rfidproj").is_file());
    assert!(p.join("compressed/logs/train.txt").is_file());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("report.json")).unwrap()).unwrap();
    let fe = report["forward_error"].as_f64().unwrap();
    assert!(fe.is_finite() && fe >= 0.0);
    assert!(report["parameters"]["achieved_ratio"].as_f64().unwrap() >= 0.4);

    let renorm = run(
        &[
            "eval", "--model", "model", "--compressed", "compressed", "--tokens", "200", "--report", "r2.json",
            "--renorm-gates",
        ],
        p,
    );
    assert!(renorm.status.success());
}

#[test]
fn infeasible_ratio_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(run(&["gen", "--spec", DEMO_SPEC, "--out", "model"], p).status.success());
    assert!(run(&["calibrate", "--model", "model", "--tokens", "100", "--seed", "1", "--out", "t.json"], p)
        .status
        .success());
    let out = run(&["compress", "--model", "model", "--trace", "t.json", "--ratio", "0.99", "--out", "c"], p);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "infeasible_ratio");
    assert!(!p.join("c").exists());
}

#[test]
fn bad_inputs_report_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("spec.json"), "{\"n\": 3").unwrap();
    let out = run(&["gen", "--spec", "spec.json", "--out", "m"], p);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "json");

    let out = run(&["eval", "--model", "nope", "--compressed", "c", "--tokens", "5", "--report", "r.json"], p);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "io");
}

#[test]
fn bad_thread_setting_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(run(&["gen", "--spec", DEMO_SPEC, "--out", "model"], p).status.success());
    assert!(run(&["calibrate", "--model", "model", "--tokens", "100", "--seed", "1", "--out", "t.json"], p)
        .status
        .success());
    let out = Command::new(env!("CARGO_BIN_EXE_moe-compress"))
        .args(["compress", "--model", "model", "--trace", "t.json", "--ratio", "0.4", "--out", "c"])
        .current_dir(p)
        .env("RFID_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "config");
}
