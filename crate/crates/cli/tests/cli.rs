use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SHORT_CAR: &str = r#"
[trajectory]
duration = 20.0

[attack]
kind = "replay"
start = 10.0

[run]
runs = 30
"#;

fn ltvwm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltvwm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn pipeline(config: &str, out: &Path, seed: &str) {
    let out = out.to_str().unwrap();
    for stage in ["synth", "calibrate", "detect", "compare"] {
        let res = ltvwm(&[stage, "--config", config, "--out", out, "--seed", seed]);
        assert_eq!(code(&res), 0, "{stage}: {}", String::from_utf8_lossy(&res.stderr));
    }
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SHORT_CAR);
    let out = dir.path().join("out");
    pipeline(&cfg, &out, "3");
    for name in [
        "schedule.csv",
        "gains.csv",
        "reference.csv",
        "assumptions.txt",
        "manifest.txt",
        "normalization.csv",
        "calibration_metric.csv",
        "threshold.txt",
        "trace.csv",
        "metric.csv",
        "detections.csv",
        "summary.txt",
        "compare.csv",
        "compare.txt",
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let metric = fs::read_to_string(out.join("metric.csv")).unwrap();
    assert!(metric.starts_with("n,t,metric,threshold,alarm,alarm_event_id\n"));
    assert_eq!(metric.lines().count(), 401);
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("attack_start_step = 200"));
    assert!(summary.contains("median_delay_s = "));
    let leftovers: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SHORT_CAR);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    pipeline(&cfg, &a, "11");
    pipeline(&cfg, &b, "11");
    pipeline(&cfg, &c, "12");
    let mut compared = 0;
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        let left = fs::read(a.join(&name)).unwrap();
        let right = fs::read(b.join(&name)).unwrap();
        assert!(left == right, "{name:?} differs between identical runs");
        compared += 1;
    }
    assert!(compared >= 14);
    assert_ne!(
        fs::read(a.join("trace.csv")).unwrap(),
        fs::read(c.join("trace.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("schedule.csv")).unwrap(),
        fs::read(c.join("schedule.csv")).unwrap()
    );
}

#[test]
fn stages_reject_artifacts_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SHORT_CAR);
    let other = write_config(
        dir.path(),
        "d.toml",
        &format!("{SHORT_CAR}\n[detector]\nwindow = 25\n"),
    );
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    assert_eq!(code(&ltvwm(&["synth", "--config", &cfg, "--out", o])), 0);
    let res = ltvwm(&["calibrate", "--config", &other, "--out", o]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("different configuration"));
}

#[test]
fn detect_without_calibration_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let res = ltvwm(&["detect", "--out", o]);
    assert_eq!(code(&res), 2);
}

#[test]
fn physical_coordinates_fail_the_assumption_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p.toml", "[scenario]\ncoordinates = \"physical\"\n");
    let out = dir.path().join("out");
    let res = ltvwm(&["synth", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 3);
    let report = fs::read_to_string(out.join("assumptions.txt")).unwrap();
    assert!(report.contains("pass = false"));
    assert!(report.contains("closed_loop_violations = [0-1199]"));
}

#[test]
fn malformed_config_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[detector]\nwindow = \"twenty\"\n");
    let res = ltvwm(&["synth", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&res), 2);
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn unknown_flag_value_is_rejected() {
    let res = ltvwm(&["detect", "--attack", "teleport"]);
    assert_eq!(code(&res), 2);
}

#[test]
fn undersized_validation_reports_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "v.toml",
        "[validation]\nsizes = [200, 400]\nreplications = 2\nalpha_replications = 2\nwishart_windows = 100\n",
    );
    let out = dir.path().join("out");
    let res = ltvwm(&["validate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 4);
    let report = fs::read_to_string(out.join("validation.txt")).unwrap();
    assert!(report.contains("[FAIL]"));
    assert!(report.ends_with("pass = false\n"));
}

#[test]
fn scalar_custom_attack_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "s.toml",
        r#"
[scenario]
kind = "scalar"
[attack]
kind = "custom"
start = 30.0
alpha = 0.5
false_process = [[0.3]]
false_measurement = [[0.2]]
[run]
runs = 20
"#,
    );
    let out = dir.path().join("out");
    pipeline(&cfg, &out, "5");
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("detected_runs = 20"), "{summary}");
    let assumptions = fs::read_to_string(out.join("assumptions.txt")).unwrap();
    assert!(assumptions.contains("watermark_delay = 1"));
}

#[test]
fn seconds_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SHORT_CAR);
    let out = dir.path().join("out");
    pipeline(&cfg, &out, "1");
    let o = out.to_str().unwrap();
    let res = ltvwm(&[
        "detect", "--config", &cfg, "--out", o, "--attack-start", "5", "--runs", "2", "--alpha", "-1",
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("attack_start_step = 100"));
    assert!(summary.contains("runs = 2"));
    let res = ltvwm(&["detect", "--config", &cfg, "--out", o, "--attack-start", "500"]);
    assert_eq!(code(&res), 2);
}
