//! End-to-end checks of the command layer: config handling, artifact
//! contents, and the process exit contract.

use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::Array1;
use qoc_cli::config::{AlphaFile, RunConfig};
use qoc_cli::{commands, Outcome, RunContext};

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

const SMALL_CONFIG: &str = r#"{
  "model": {
    "levels": 4,
    "essential": 2,
    "frequency_ghz": 4.0,
    "anharmonicity_ghz": 0.2,
    "guard_weights": [0.0, 0.0, 0.1, 1.0]
  },
  "controls": {
    "splines": 6,
    "carrier_frequencies_ghz": [0.0, -0.2],
    "amplitude_max_mhz": 10.0
  },
  "grid": { "duration_ns": 10.0, "steps": 200 },
  "target": { "gate": "swap_ends" },
  "optimizer": { "max_iterations": 40, "tolerance": 1e-4 }
}"#;

fn resolve(config: &Path, out: &Path, alpha: Option<&Path>, seed: u64) -> RunContext {
    RunContext::resolve(config, alpha, Some(out), Some(seed), 1).unwrap()
}

#[test]
fn config_round_trips_through_serialization() {
    let parsed: RunConfig = serde_json::from_str(SMALL_CONFIG).unwrap();
    let text = serde_json::to_string_pretty(&parsed).unwrap();
    let reparsed: RunConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, reparsed);
}

#[test]
fn unknown_config_fields_are_rejected() {
    let text = SMALL_CONFIG.replace("\"max_iterations\"", "\"max_iters\"");
    let err = serde_json::from_str::<RunConfig>(&text).unwrap_err();
    assert!(err.to_string().contains("max_iters"), "{err}");
}

#[test]
fn conflicting_amplitude_bounds_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_CONFIG.replace(
        "\"amplitude_max_mhz\": 10.0",
        "\"amplitude_max_mhz\": 10.0, \"envelope_bound_mhz\": 9.0",
    );
    let config: RunConfig = serde_json::from_str(&text).unwrap();
    let err = config.build(dir.path()).unwrap_err();
    assert!(err.to_string().contains("mutually exclusive"), "{err}");
}

#[test]
fn missing_target_matrix_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_CONFIG.replace(
        "\"gate\": \"swap_ends\"",
        "\"matrix_file\": \"does_not_exist.json\"",
    );
    let config: RunConfig = serde_json::from_str(&text).unwrap();
    let err = config.build(dir.path()).unwrap_err();
    assert!(format!("{err:#}").contains("does_not_exist.json"), "{err:#}");
}

#[test]
fn explicit_target_matrix_matches_builtin_gate() {
    let dir = tempfile::tempdir().unwrap();
    // X on the two essential levels, written out as an explicit matrix.
    std::fs::write(
        dir.path().join("x_gate.json"),
        r#"{ "real": [[0.0, 1.0], [1.0, 0.0]], "imag": [[0.0, 0.0], [0.0, 0.0]] }"#,
    )
    .unwrap();
    let text = SMALL_CONFIG.replace(
        "\"gate\": \"swap_ends\"",
        "\"matrix_file\": \"x_gate.json\"",
    );
    let config: RunConfig = serde_json::from_str(&text).unwrap();
    let from_file = config.build(dir.path()).unwrap();

    let builtin: RunConfig = serde_json::from_str(SMALL_CONFIG).unwrap();
    let from_name = builtin.build(dir.path()).unwrap();
    assert_eq!(from_file.target.d_u(), from_name.target.d_u());
    assert_eq!(from_file.target.d_v(), from_name.target.d_v());
}

#[test]
fn simulate_identity_at_zero_alpha_reports_zero_infidelity() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_CONFIG.replace("\"gate\": \"swap_ends\"", "\"gate\": \"identity\"");
    // Zero anharmonicity: the rotating-frame drift vanishes, so doing
    // nothing implements the identity exactly.
    let text = text.replace("\"anharmonicity_ghz\": 0.2", "\"anharmonicity_ghz\": 0.0");
    let config = write_config(dir.path(), "config.json", &text);
    let ctx = resolve(&config, dir.path(), None, 0);
    assert_eq!(commands::run_simulate(&ctx).unwrap(), Outcome::Success);

    let breakdown: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("breakdown.json")).unwrap())
            .unwrap();
    assert!(breakdown["infidelity"].as_f64().unwrap().abs() <= 1e-12);
    assert!(breakdown["guard_penalty"].as_f64().unwrap().abs() <= 1e-12);
}

#[test]
fn simulate_writes_population_traces_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_CONFIG.replace(
        "\"optimizer\":",
        "\"output\": { \"populations\": true }, \"optimizer\":",
    );
    let config = write_config(dir.path(), "config.json", &text);
    let ctx = resolve(&config, dir.path(), None, 0);
    commands::run_simulate(&ctx).unwrap();

    let csv = std::fs::read_to_string(dir.path().join("populations.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    // 4 levels x 2 initial states plus the time column.
    assert_eq!(header.split(',').count(), 1 + 4 * 2);
    assert!(header.starts_with("time_ns,pop_l0_c0,pop_l0_c1"));
    // 200 steps -> 201 nodes recorded.
    assert_eq!(lines.count(), 201);
}

#[test]
fn optimize_then_verify_probe_and_spectrum_share_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", SMALL_CONFIG);
    let ctx = resolve(&config, dir.path(), None, 3);
    let outcome = commands::run_optimize(&ctx).unwrap();
    assert!(matches!(outcome, Outcome::Success | Outcome::NotConverged));

    // The objective must improve on the random start.
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    let rows: Vec<&str> = history.lines().skip(1).collect();
    let total = |row: &str| -> f64 { row.split(',').nth(3).unwrap().parse().unwrap() };
    assert!(rows.len() >= 2);
    assert!(total(rows.last().unwrap()) < total(rows[0]));

    // alpha_opt.json feeds the analysis commands.
    let alpha_path = dir.path().join("alpha_opt.json");
    let alpha = AlphaFile::read(&alpha_path).unwrap();
    assert_eq!(alpha.splines, 6);
    assert_eq!(alpha.carriers, 2);
    assert_eq!(alpha.alpha.len(), 24);

    let ctx = resolve(&config, dir.path(), Some(&alpha_path), 3);
    assert_eq!(commands::run_verify(&ctx, false).unwrap(), Outcome::Success);
    assert_eq!(commands::run_probe(&ctx).unwrap(), Outcome::Success);
    assert_eq!(commands::run_spectrum(&ctx).unwrap(), Outcome::Success);

    let asym = std::fs::read_to_string(dir.path().join("asymmetry.csv")).unwrap();
    assert_eq!(asym.lines().count(), 1 + 4);
    let spectrum = std::fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    assert!(spectrum.lines().count() > 100);
    let eigen = std::fs::read_to_string(dir.path().join("eigenvalues.csv")).unwrap();
    assert_eq!(eigen.lines().count(), 1 + 24);
}

#[test]
fn corrupted_gradient_hook_fails_the_checks() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", SMALL_CONFIG);
    let ctx = resolve(&config, dir.path(), None, 0);
    assert_eq!(commands::run_verify(&ctx, true).unwrap(), Outcome::CheckFailed);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["all_passed"], serde_json::Value::Bool(false));
}

#[test]
fn zero_step_grid_passes_verification_trivially() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_CONFIG.replace("\"steps\": 200", "\"steps\": 0");
    let config = write_config(dir.path(), "config.json", &text);
    let ctx = resolve(&config, dir.path(), None, 0);
    assert_eq!(commands::run_verify(&ctx, false).unwrap(), Outcome::Success);
}

#[test]
fn huge_tolerance_stops_at_the_initial_point() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_CONFIG.replace("\"tolerance\": 1e-4", "\"tolerance\": 1e300");
    let config = write_config(dir.path(), "config.json", &text);
    let ctx = resolve(&config, dir.path(), None, 0);
    assert_eq!(commands::run_optimize(&ctx).unwrap(), Outcome::Success);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["iterations"], serde_json::json!(0));
    assert_eq!(summary["stop"], serde_json::json!("converged"));
}

#[test]
fn mismatched_alpha_layout_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", SMALL_CONFIG);
    let alpha_path = dir.path().join("alpha.json");
    AlphaFile::write(&alpha_path, 5, 2, &Array1::zeros(20)).unwrap();
    let err = RunContext::resolve(&config, Some(&alpha_path), Some(dir.path()), None, 1)
        .unwrap_err();
    assert!(err.to_string().contains("layout"), "{err}");
}

#[test]
fn binary_exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", SMALL_CONFIG);
    let bin = env!("CARGO_BIN_EXE_qoc");

    // 0: clean verify.
    let ok = Command::new(bin)
        .args(["verify", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));

    // 1: usage error (missing required flag).
    let usage = Command::new(bin).arg("verify").output().unwrap();
    assert_eq!(usage.status.code(), Some(1));

    // 1: config error (bad file).
    let missing = Command::new(bin)
        .args(["simulate", "--config", "no_such_config.json"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));

    // 2: numerical check failure via the fault-injection hook.
    let corrupt = Command::new(bin)
        .args(["verify", "--corrupt-gradient", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(corrupt.status.code(), Some(2));

    // 3: optimizer out of budget (results still written).
    let text = SMALL_CONFIG
        .replace("\"max_iterations\": 40", "\"max_iterations\": 1")
        .replace("\"tolerance\": 1e-4", "\"tolerance\": 1e-14");
    let tight = write_config(dir.path(), "tight.json", &text);
    let out3 = dir.path().join("budget");
    let budget = Command::new(bin)
        .args(["optimize", "--config"])
        .arg(&tight)
        .arg("--out")
        .arg(&out3)
        .output()
        .unwrap();
    assert_eq!(budget.status.code(), Some(3), "{}", String::from_utf8_lossy(&budget.stderr));
    assert!(out3.join("alpha_opt.json").exists());
    assert!(out3.join("history.csv").exists());
}
