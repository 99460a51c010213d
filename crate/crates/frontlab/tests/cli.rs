use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn frontlab(args: &[&str], config: &str, out: &Path) -> Output {
    let dir = out.parent().unwrap();
    let path = dir.join(format!(
        "{}.json",
        out.file_name().unwrap().to_string_lossy()
    ));
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_frontlab"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(out)
        .env_remove("FRONTLAB_WORKERS")
        .output()
        .unwrap()
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn rows(path: PathBuf) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn speed_without_flow_is_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("speed");
    let o = frontlab(&["speed"], r#"{"flow": {"kind": "zero"}}"#, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("speed.csv")).unwrap();
    assert!(!text.contains('\r'));
    let r = rows(out.join("speed.csv"));
    assert_eq!(r.len(), 1);
    let c: f64 = r[0][3].parse().unwrap();
    assert!((c - 2.0).abs() < 1e-5, "{c}");
    assert_eq!(&r[0][6], "upwind");
    assert_eq!(&r[0][7], "32x32");
}

#[test]
fn cellular_flow_passes_the_property_suite() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("check");
    let cfg = r#"{"cell": {"periods": [1, 1], "resolution": [48, 48]},
                  "flow": {"kind": "cellular", "amplitude": 1}}"#;
    let o = frontlab(&["check"], cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = read_json(out.join("check.json"));
    assert_eq!(rec["all_pass"], true);
    let props = rows(out.join("check.csv"));
    assert!(props.len() >= 6);
    assert!(props.iter().all(|p| &p[3] == "true"));
    assert!(!out.join("error.json").exists());
}

#[test]
fn negative_period_exits_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bad");
    let cfg = r#"{"cell": {"periods": [1, -1], "resolution": [8, 8]}}"#;
    let o = frontlab(&["speed"], cfg, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn schema_violations_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        r#"{"flwo": {"kind": "zero"}}"#,
        r#"{"experiment": "sweep"}"#,
        r#"{"tolerances": {"eigen": -1e-8}}"#,
        r#"not json"#,
    ];
    for (i, cfg) in cases.iter().enumerate() {
        let out = tmp.path().join(format!("case{i}"));
        let o = frontlab(&["speed"], cfg, &out);
        assert_eq!(o.status.code(), Some(2), "{cfg}");
        assert!(!out.exists());
    }
}

#[test]
fn resolved_config_echoes_every_default() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("resolved");
    let o = frontlab(&["speed", "--seed", "42"], "{}", &out);
    assert!(o.status.success());
    let c = read_json(out.join("resolved_config.json"));
    assert_eq!(c["experiment"], "speed");
    assert_eq!(c["seed"], 42);
    assert_eq!(c["scheme"], "upwind");
    assert_eq!(c["direction"], serde_json::json!([1.0, 0.0]));
    assert_eq!(c["tolerances"]["eigen"], 1e-8);
    assert_eq!(c["outputs"]["csv"], "speed.csv");
    assert_eq!(c["flow"]["kind"], "zero");
    assert_eq!(c["cell"]["resolution"], serde_json::json!([32, 32]));
}

#[test]
fn computation_failure_writes_an_error_record() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("coarse");
    let cfg = r#"{"h1dim": {"dims": [3], "ns": [32], "resolution": 8}}"#;
    let o = frontlab(&["h1dim"], cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    let e = read_json(out.join("error.json"));
    assert_eq!(e["error"], "under_resolved");
    assert!(e["message"].as_str().unwrap().contains("need at least 64"));
    assert!(out.join("resolved_config.json").exists());
    assert!(!out.join("h1dim.csv").exists());
}

#[test]
fn unbuildable_flow_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("plug");
    let cfg = r#"{"cell": {"periods": [1, 1, 1], "resolution": [2, 16, 16]},
                  "flow": {"kind": "two_cylinder", "axis": 0, "radius": 0.2, "gap": 0.05, "profile": "plug"},
                  "direction": [1, 0, 0]}"#;
    let o = frontlab(&["varlimit"], cfg, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn failed_property_exits_1_after_writing_results() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("strict");
    let cfg = r#"{"flow": {"kind": "cellular", "amplitude": 1}, "check": {"volume_tol": 1e-30}}"#;
    let o = frontlab(&["check"], cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(read_json(out.join("check.json"))["all_pass"], false);
    let e = read_json(out.join("error.json"));
    assert_eq!(e["error"], "check_failed");
    assert!(e["message"]
        .as_str()
        .unwrap()
        .contains("volume_preservation"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{"flow": {"kind": "cellular", "amplitude": 1},
                  "cell": {"periods": [1, 1], "resolution": [16, 16]},
                  "varlimit": {"method": "maximize", "starts": 5}}"#;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = frontlab(&["varlimit", "--seed", "3"], cfg, out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        fs::read(a.join("varlimit.csv")).unwrap(),
        fs::read(b.join("varlimit.csv")).unwrap()
    );
}

#[test]
fn workers_fall_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("h1dim.json");
    fs::write(&path, r#"{"h1dim": {"dims": [2], "ns": [4, 8]}}"#).unwrap();
    let mut outs = Vec::new();
    for w in ["1", "3"] {
        let out = tmp.path().join(format!("w{w}"));
        let o = Command::new(env!("CARGO_BIN_EXE_frontlab"))
            .args(["h1dim", "--config"])
            .arg(&path)
            .arg("--out")
            .arg(&out)
            .env("FRONTLAB_WORKERS", w)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(fs::read(out.join("h1dim.csv")).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
}
