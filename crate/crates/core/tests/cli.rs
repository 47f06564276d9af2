use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fu-incentive"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--quiet")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn csv_lines(out: &Path) -> Vec<String> {
    std::fs::read_to_string(out.with_extension("csv"))
        .unwrap()
        .lines()
        .map(str::to_owned)
        .collect()
}

#[test]
fn nash_mode_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "s.json",
        r#"{"num_remaining": 3, "num_removed": 1, "seed": 5}"#,
    );
    let out = dir.path().join("nash.json");
    let o = run(&["--mode", "nash"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["canonical"]["mode"], "nash");
    assert_eq!(v["canonical"]["exit_code"], 0);
    assert!(v["timing"].is_object());
    let lines = csv_lines(&out);
    assert_eq!(
        lines[0],
        "client_id,alpha,cost,het_to_removed,payment,participation,q_bound"
    );
    assert_eq!(lines.len(), 4);
}

#[test]
fn payments_above_cost_give_full_participation_when_clients_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    // a single class and equal quantities make every client identical
    let cfg = write_config(
        dir.path(),
        "h.json",
        r#"{"num_remaining": 3, "num_removed": 1, "num_classes": 1, "dirichlet_beta": 1000.0, "seed": 1}"#,
    );
    let out = dir.path().join("h.json.out");
    let o = run(&["--mode", "nash", "--payments", "50,50,50"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let x = v["canonical"]["result"]["equilibrium"]["x_star"].as_array().unwrap();
    assert!(x.iter().all(|xi| xi.as_f64().unwrap() == 1.0), "{x:?}");
}

#[test]
fn wrong_payment_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.json", r#"{"num_remaining": 3, "seed": 5}"#);
    let o = run(
        &["--mode", "nash", "--payments", "1,2"],
        &cfg,
        &dir.path().join("o.json"),
    );
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).unwrap();
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn unknown_and_invalid_fields_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    for body in [
        r#"{"seed": 1, "bogus": 3}"#,
        r#"{"seed": 1, "dirichlet_beta": -0.5}"#,
        r#"{"num_remaining": 3}"#,
        "not json",
    ] {
        let cfg = write_config(dir.path(), "bad.json", body);
        let o = run(&["--mode", "nash"], &cfg, &dir.path().join("o.json"));
        assert_eq!(
            o.status.code(),
            Some(2),
            "{body}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let o = run(
        &["--mode", "nash"],
        &dir.path().join("missing.json"),
        &dir.path().join("o.json"),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_block_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "s.json",
        r#"{"num_remaining": 3, "num_removed": 1, "seed": 9}"#,
    );
    let out = dir.path().join("sweep.json");
    let o = run(
        &["--mode", "sweep", "--sweep-key", "budget", "--sweep-values", "0.5,1,2"],
        &cfg,
        &out,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = csv_lines(&out);
    assert!(lines[0].starts_with("sweep_value,client_id,"));
    assert_eq!(lines.len(), 1 + 3 * 3);
    assert!(lines[1].starts_with("0.5,0,"));
    assert!(lines[9].starts_with("2.0,2,"));
}

#[test]
fn overrides_reach_the_canonical_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "s.json",
        r#"{"num_remaining": 2, "num_removed": 1, "seed": 9}"#,
    );
    let out = dir.path().join("u.json");
    let o = run(
        &[
            "--mode",
            "uniform",
            "--seed-override",
            "77",
            "--budget-override",
            "0.25",
            "--epsilon",
            "1e-5",
        ],
        &cfg,
        &out,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["canonical"]["config"]["seed"], 77);
    assert_eq!(v["canonical"]["config"]["budget"], 0.25);
    assert_eq!(v["canonical"]["solver"]["epsilon"], 1e-5);
    assert!(v["canonical"]["result"]["payment_total"].as_f64().unwrap() <= 0.25 + 1e-9);
}

#[test]
fn oracle_suite_passes_on_a_small_instance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "s.json",
        r#"{"num_remaining": 3, "num_removed": 1, "seed": 4}"#,
    );
    let out = dir.path().join("o.json");
    let o = run(&["--mode", "oracle-suite", "--grid-points", "1001"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let checks = v["canonical"]["result"].as_array().unwrap();
    assert!(checks.iter().all(|c| c["passed"] == true), "{checks:?}");
}
