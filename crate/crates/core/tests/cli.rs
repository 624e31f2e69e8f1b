use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_levy-bsde")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn malformed_json_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "bad.json", "{\n  \"name\": \"x\",\n  \"seed\": 1,,\n}\n");
    for cmd in ["run", "validate"] {
        let out = cli(&[cmd, &p]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("column"), "{err}");
    }
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "c.json", r#"{"name": "x", "kind": "solve", "seed": 1, "net": {"n": "many"}}"#);
    let out = cli(&["validate", &p]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("net.n"));

    let p = write(dir.path(), "d.json", r#"{"name": "x", "kind": "solve"}"#);
    let out = cli(&["validate", &p]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn unknown_scenario_is_an_io_error() {
    assert_eq!(cli(&["run", "no-such-scenario"]).status.code(), Some(5));
}

#[test]
fn list_scenarios() {
    let out = cli(&["list-scenarios"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 10);

    let out = cli(&["list-scenarios", "--kind", "rates"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 1);
    assert!(text.lines().all(|l| l.split_whitespace().nth(1) == Some("rates")));

    let out = cli(&["list-scenarios", "--kind", "nothing"]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
}

#[test]
fn validate_builtin_and_file() {
    let out = cli(&["validate", "counterexample"]);
    assert!(out.status.success());
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "ok.json", r#"{"name": "tiny", "kind": "solve", "seed": 4, "n_paths": 500}"#);
    let out = cli(&["validate", &p]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("tiny"));
}

#[test]
fn run_writes_hashed_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "tiny.json",
        r#"{"name": "tiny", "kind": "solve", "seed": 4, "n_paths": 2000, "net": {"n": 8}}"#,
    );
    let out_dir = dir.path().join("out");
    let out = cli(&["run", &cfg, "--out", out_dir.to_str().unwrap(), "--threads", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["checks_passed"], true);
    let outputs = manifest["outputs"].as_array().unwrap();
    let mut listed: Vec<String> = Vec::new();
    for o in outputs {
        let rel = o["path"].as_str().unwrap();
        let bytes = fs::read(out_dir.join(rel)).unwrap();
        assert_eq!(o["sha256"].as_str().unwrap(), format!("{:x}", Sha256::digest(&bytes)));
        assert_eq!(o["bytes"].as_u64().unwrap() as usize, bytes.len());
        listed.push(rel.to_string());
    }
    assert!(listed.contains(&"summary.txt".to_string()));
    for entry in fs::read_dir(out_dir.join("results")).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        assert!(listed.contains(&format!("results/{name}")), "{name} not in manifest");
    }

    // same config, other thread count: identical CSVs
    let again = dir.path().join("again");
    let out = cli(&["run", &cfg, "--out", again.to_str().unwrap(), "--threads", "1"]);
    assert!(out.status.success());
    for o in outputs {
        let rel = o["path"].as_str().unwrap();
        if rel.ends_with(".csv") {
            assert_eq!(fs::read(out_dir.join(rel)).unwrap(), fs::read(again.join(rel)).unwrap(), "{rel}");
        }
    }
}

#[test]
fn failed_checks_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    // an empty slope range cannot be met
    let cfg = write(
        dir.path(),
        "r.json",
        r#"{"name": "r", "kind": "rates", "seed": 2, "n_paths": 500,
            "params": {"nets": [2, 4, 8], "reference": 16},
            "tolerances": {"slope_range": [5.0, 6.0]}}"#,
    );
    let out = cli(&["run", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL]"));
}
