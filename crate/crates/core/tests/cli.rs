use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dips(args: &[&str], envs: &[(&str, &str)]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dips"))
        .args(args)
        .args(["--log-level", "error"])
        .env_clear()
        .envs(envs.iter().copied())
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn summary(out: &Output) -> Value {
    let v = stdout_json(out);
    let path = v["summary"].as_str().expect("summary path");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn tiny(out: &Path) -> Vec<String> {
    [
        "--rounds", "8", "--iterations", "1", "--n-lab", "30", "--n-unlab", "40", "--n-test", "50", "--noise-levels", "0.2",
        "--out-dir",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([out.display().to_string()])
    .collect()
}

#[test]
fn noise_sweep_writes_runs_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["noise-sweep".to_string(), "--seeds".into(), "2".into()];
    args.extend(tiny(dir.path()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = dips(&args, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let s = summary(&out);
    assert_eq!(s["experiment"], "noise_sweep");
    let runs = std::fs::read_to_string(dir.path().join("noise_sweep_runs.csv")).unwrap();
    // header plus 5 methods x 2 seeds
    assert_eq!(runs.lines().count(), 11);
}

#[test]
fn precedence_is_cli_then_env_then_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("dips.toml");
    std::fs::write(&config, "seeds = 3\nrounds = 8\nnoise_levels = [0.2]\nn_lab = 30\nn_unlab = 40\nn_test = 50\niterations = 1\n").unwrap();
    let cfg = config.to_str().unwrap();
    let out_dir = dir.path().join("out");
    let od = out_dir.to_str().unwrap();

    let from_config = dips(&["--config", cfg, "ablation", "--out-dir", od], &[]);
    assert!(from_config.status.success(), "{}", String::from_utf8_lossy(&from_config.stdout));
    assert_eq!(summary(&from_config)["spec"]["seeds"], 3);

    let from_env = dips(&["--config", cfg, "ablation", "--out-dir", od], &[("DIPS_SEEDS", "2")]);
    assert_eq!(summary(&from_env)["spec"]["seeds"], 2);

    let from_cli = dips(&["--config", cfg, "ablation", "--out-dir", od, "--seeds", "1"], &[("DIPS_SEEDS", "2")]);
    assert_eq!(summary(&from_cli)["spec"]["seeds"], 1);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "no_such_option = 1\n").unwrap();
    let out = dips(&["--config", config.to_str().unwrap(), "two-moons"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stdout_json(&out)["error"]["kind"], "usage");
}

#[test]
fn bad_flag_value_is_a_usage_error() {
    let out = dips(&["noise-sweep", "--seeds", "many"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let v = stdout_json(&out);
    assert_eq!(v["error"]["kind"], "usage");
    assert!(v["error"]["message"].as_str().unwrap().contains("--seeds"));
}

#[test]
fn invalid_spec_value_reports_invalid_argument() {
    let dir = tempfile::tempdir().unwrap();
    let out = dips(
        &["noise-sweep", "--noise-levels", "0.7", "--out-dir", dir.path().to_str().unwrap()],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stdout_json(&out)["error"]["kind"], "invalid_argument");
}

#[test]
fn missing_csv_reports_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dips(
        &["run-csv", "--data", "/nonexistent/data.csv", "--label-column", "label", "--out-dir", dir.path().to_str().unwrap()],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stdout_json(&out)["error"]["kind"], "io");
}

#[test]
fn single_run_writes_history_and_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run".to_string(), "--p-corrupt".into(), "0.2".into(), "--timings".into()];
    args.extend(tiny(dir.path()).into_iter().filter(|a| a != "--noise-levels" && a != "0.2"));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = dips(&args, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    for name in ["run_history.json", "run_model.json", "run_dynamics.csv", "run_timings.json"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let history: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run_history.json")).unwrap()).unwrap();
    assert!(history.to_string().contains("iteration"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str, jobs: &str| {
        let out_dir = dir.path().join(format!("{sub}-{jobs}"));
        let od = out_dir.to_str().unwrap().to_string();
        let out = dips(
            &["version-compare", "--seeds", "3", "--jobs", jobs, "--rounds", "8", "--iterations", "2", "--n-lab", "30", "--n-unlab", "40", "--n-test", "50", "--noise-levels", "0.3", "--out-dir", &od],
            &[],
        );
        assert!(out.status.success());
        (
            std::fs::read(out_dir.join("version_compare_runs.csv")).unwrap(),
            std::fs::read(out_dir.join("version_compare_summary.json")).unwrap(),
        )
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let c = run("c", "3");
    assert_eq!(a, b);
    assert_eq!(a, c);
}
