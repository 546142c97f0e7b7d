//! End-to-end runs of the `bglab` binary.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "seed = 9\n[flow_validate]\ndims = [2]\nlattice_sides = [8]\nmin_events = 100\nreversibility_trials = 10\njacobian_trials = 2\n";

fn bglab(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_bglab"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("runs"))
        .arg("--jobs")
        .arg("2")
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn artifacts_are_deterministic_and_manifest_is_complete() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = bglab(a.path(), SMALL, &["flow-validate"]);
    let rb = bglab(b.path(), SMALL, &["flow-validate"]);
    assert_eq!(ra.status.code(), Some(0), "{}", String::from_utf8_lossy(&ra.stderr));
    assert_eq!(rb.status.code(), Some(0));
    let run = |d: &Path| d.join("runs").join("flow-validate-9");
    let csv_a = std::fs::read(run(a.path()).join("flow_validate.csv")).unwrap();
    let csv_b = std::fs::read(run(b.path()).join("flow_validate.csv")).unwrap();
    assert_eq!(csv_a, csv_b);

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run(a.path()).join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "flow-validate");
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["jobs"], 2);
    assert_eq!(manifest["passed"], true);
    assert!(manifest["finished_unix"].as_u64().unwrap() >= manifest["started_unix"].as_u64().unwrap());
    assert_eq!(manifest["config"]["flow_validate"]["min_events"], 100);
    assert!(run(a.path()).join("config.toml").exists());
}

#[test]
fn seed_flag_overrides_config_and_names_the_run() {
    let d = tempfile::tempdir().unwrap();
    let r = bglab(d.path(), SMALL, &["--seed", "31", "flow-validate", "--trials", "5"]);
    assert_eq!(r.status.code(), Some(0));
    assert!(d.path().join("runs/flow-validate-31/manifest.json").exists());
}

#[test]
fn failing_predicate_exits_one() {
    let d = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL}reversibility_tol = 0.0\n");
    let r = bglab(d.path(), &cfg, &["flow-validate"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stdout).contains("FAIL reversibility"));
    // Artifacts are still written for inspection.
    assert!(d.path().join("runs/flow-validate-9/flow_validate.csv").exists());
}

#[test]
fn bad_input_exits_two() {
    let d = tempfile::tempdir().unwrap();
    // Mismatched grid.
    let bad_grid = "[flow_validate]\ndims = [2, 3]\nlattice_sides = [8]\n";
    assert_eq!(bglab(d.path(), bad_grid, &["flow-validate"]).status.code(), Some(2));
    // Unknown key.
    assert_eq!(bglab(d.path(), "[flow_validate]\nmin_event = 3\n", &["flow-validate"]).status.code(), Some(2));
    // Lone --s.
    assert_eq!(bglab(d.path(), "", &["singular-scaling", "--s", "2"]).status.code(), Some(2));
    // Unknown subcommand: clap's usage error.
    assert_eq!(bglab(d.path(), "", &["no-such-thing"]).status.code(), Some(2));
}

#[test]
fn print_config_echoes_overrides() {
    let d = tempfile::tempdir().unwrap();
    let r = bglab(d.path(), "", &["--print-config", "hat-probe", "--probes", "17"]);
    assert_eq!(r.status.code(), Some(0));
    let text = String::from_utf8(r.stdout).unwrap();
    let echoed = bglab::experiments::ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(echoed.hat_probe.probes, 17);
    assert!(!d.path().join("runs").exists());
}
