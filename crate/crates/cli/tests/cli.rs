//! End-to-end checks of the `deep-lcc` binary: exit codes, artifact layout,
//! and bytewise reproducibility from (config, seed).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deep-lcc"))
}

fn workdir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process not killed by signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

/// A four-vehicle platoon with one CAV and a short sinusoid: small enough
/// that collect + run finish in seconds, large enough to exercise the
/// whole pipeline.
fn small_config(dir: &Path) -> Value {
    json!({
        "n": 4,
        "cav_indices": [2],
        "controller": "deepc",
        "arms": ["all-hdv", "deepc"],
        "tuning": {
            "t_ini": 10,
            "horizon": 20,
            "w_v": 1.0,
            "w_s": 0.5,
            "w_u": 0.1,
            "lambda_g": 10.0,
            "lambda_y": 10000.0,
            "s_min": 5.0,
            "s_max": 40.0,
            "a_min": -5.0,
            "a_max": 2.0,
            "eps_forecast": 0.0
        },
        "scenario": {
            "name": "smoke",
            "head_profile": {"kind": "sinusoid", "v_star": 15.0, "amplitude": 2.0, "period": 6.0},
            "duration": 5.0,
            "noise_seed": 7,
            "equilibrium_policy": {"policy": "fixed", "v_star": 15.0}
        },
        "dt": 0.05,
        "dataset": dir.join("dataset.json"),
        "output_dir": dir.join("out"),
        "seeds": [7, 8],
        "collect_length": 160
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run_cli(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

#[test]
fn collect_is_deterministic_and_reports_excitation() {
    let dir = workdir("collect");
    let cfg_path = write_config(&dir, &small_config(&dir));
    let cfg = cfg_path.to_str().unwrap();

    let first = run_cli(&["collect", "--config", cfg]);
    assert_eq!(code(&first), 0, "stderr: {}", stderr(&first));
    let text = stdout(&first);
    assert!(text.contains("persistently exciting"), "stdout: {text}");
    assert!(text.contains("satisfied"), "stdout: {text}");

    let bytes = fs::read(dir.join("dataset.json")).unwrap();
    let second = run_cli(&["collect", "--config", cfg]);
    assert_eq!(code(&second), 0);
    assert_eq!(fs::read(dir.join("dataset.json")).unwrap(), bytes);
}

#[test]
fn check_reports_the_benchmark_layout_structure() {
    let dir = workdir("check");
    let mut cfg = small_config(&dir);
    cfg["n"] = json!(8);
    cfg["cav_indices"] = json!([3, 6]);
    let cfg_path = write_config(&dir, &cfg);

    let out = run_cli(&["check", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["controllable"], json!(false));
    assert_eq!(report["stabilizable"], json!(true));
    assert_eq!(report["observable"], json!(true));
    assert_eq!(report["combined_input_controllable"], json!(true));
    assert_eq!(report["v_star"], json!(15.0));
    assert_eq!(report["s_star"].as_array().unwrap().len(), 8);
}

#[test]
fn run_writes_artifacts_and_is_bytewise_reproducible() {
    let dir = workdir("run");
    let cfg_path = write_config(&dir, &small_config(&dir));
    let cfg = cfg_path.to_str().unwrap();

    assert_eq!(code(&run_cli(&["collect", "--config", cfg])), 0);

    let out_a = dir.join("a");
    let out_b = dir.join("b");
    let first = run_cli(&["run", "--config", cfg, "--out", out_a.to_str().unwrap()]);
    assert_eq!(code(&first), 0, "stderr: {}", stderr(&first));
    let second = run_cli(&["run", "--config", cfg, "--out", out_b.to_str().unwrap()]);
    assert_eq!(code(&second), 0);

    let traj_a = fs::read(out_a.join("trajectory_deepc_7.csv")).unwrap();
    let traj_b = fs::read(out_b.join("trajectory_deepc_7.csv")).unwrap();
    assert_eq!(traj_a, traj_b);

    let metrics: Value =
        serde_json::from_str(&fs::read_to_string(out_a.join("metrics_deepc_7.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["collision"], json!(false));
    assert!(metrics["min_cav_spacing"].as_f64().unwrap() > 0.0);

    let decisions = fs::read_to_string(out_a.join("decisions_deepc_7.csv")).unwrap();
    assert_eq!(decisions.lines().count(), 100 + 1);

    let reseeded = run_cli(&[
        "run", "--config", cfg,
        "--out", out_a.to_str().unwrap(),
        "--seed", "8",
    ]);
    assert_eq!(code(&reseeded), 0);
    let traj_8 = fs::read(out_a.join("trajectory_deepc_8.csv")).unwrap();
    assert_ne!(traj_8, traj_a);
}

#[test]
fn metrics_recomputes_what_run_reported() {
    let dir = workdir("metrics");
    let mut cfg = small_config(&dir);
    cfg["controller"] = json!("all-hdv");
    let cfg_path = write_config(&dir, &cfg);
    let cfg = cfg_path.to_str().unwrap();

    let out = dir.join("out");
    assert_eq!(code(&run_cli(&["run", "--config", cfg])), 0);

    let traj = out.join("trajectory_all-hdv_7.csv");
    let recomputed = run_cli(&["metrics", traj.to_str().unwrap(), "--config", cfg]);
    assert_eq!(code(&recomputed), 0, "stderr: {}", stderr(&recomputed));

    let from_cmd: Value = serde_json::from_str(&stdout(&recomputed)).unwrap();
    let from_run: Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics_all-hdv_7.json")).unwrap())
            .unwrap();
    for key in [
        "msve",
        "realized_cost",
        "min_cav_spacing",
        "fuel_tail",
        "peak_velocity_error",
    ] {
        assert_eq!(from_cmd[key], from_run[key], "field {key} drifted");
    }
    let fuel_cmd = from_cmd["total_fuel"].as_array().unwrap();
    let fuel_run = from_run["total_fuel"].as_array().unwrap();
    assert_eq!(fuel_cmd[2..], fuel_run[2..]);
}

#[test]
fn batch_compares_arms_and_keeps_every_log() {
    let dir = workdir("batch");
    let cfg_path = write_config(&dir, &small_config(&dir));

    let out = run_cli(&["batch", "--config", cfg_path.to_str().unwrap(), "--jobs", "2"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let summary: Value =
        serde_json::from_str(&fs::read_to_string(dir.join("out/batch_summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["seeds"], json!([7, 8]));
    let arms = summary["arms"].as_array().unwrap();
    assert_eq!(arms.len(), 2);
    for arm in arms {
        assert_eq!(arm["metrics"].as_array().unwrap().len(), 2);
        assert_eq!(arm["collisions"], json!(0));
    }
    for name in [
        "trajectory_all-hdv_7.csv",
        "trajectory_all-hdv_8.csv",
        "trajectory_deepc_7.csv",
        "trajectory_deepc_8.csv",
        "decisions_deepc_7.csv",
    ] {
        assert!(dir.join("out").join(name).exists(), "missing {name}");
    }
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = workdir("exit-codes");

    let no_config = run_cli(&["run"]);
    assert_eq!(code(&no_config), 2);

    let garbled = dir.join("garbled.json");
    fs::write(&garbled, "{not json").unwrap();
    let bad_json = run_cli(&["check", "--config", garbled.to_str().unwrap()]);
    assert_eq!(code(&bad_json), 2);

    let mut invalid = small_config(&dir);
    invalid["cav_indices"] = json!([0]);
    let invalid_path = dir.join("invalid.json");
    fs::write(&invalid_path, invalid.to_string()).unwrap();
    let bad_field = run_cli(&["check", "--config", invalid_path.to_str().unwrap()]);
    assert_eq!(code(&bad_field), 2, "stderr: {}", stderr(&bad_field));

    let cfg_path = write_config(&dir, &small_config(&dir));
    let cfg = cfg_path.to_str().unwrap();
    let missing_dataset = run_cli(&["run", "--config", cfg]);
    assert_eq!(code(&missing_dataset), 2);
    assert!(stderr(&missing_dataset).contains("collect"), "hint the fix");

    fs::write(dir.join("dataset.json"), "{\"version\": \"zero\"").unwrap();
    let corrupt = run_cli(&["run", "--config", cfg]);
    assert_eq!(code(&corrupt), 4, "stderr: {}", stderr(&corrupt));
}

#[test]
fn a_collision_exits_three_but_still_writes_logs() {
    let dir = workdir("collision");
    let mut cfg = small_config(&dir);
    cfg["controller"] = json!("all-hdv");
    cfg["hdv_params"] = json!([
        {"alpha": 0.05, "beta": 0.05, "s_st": 5.0, "s_go": 35.0, "v_max": 30.0},
        {"alpha": 0.05, "beta": 0.05, "s_st": 5.0, "s_go": 35.0, "v_max": 30.0},
        {"alpha": 0.05, "beta": 0.05, "s_st": 5.0, "s_go": 35.0, "v_max": 30.0}
    ]);
    cfg["scenario"] = json!({
        "name": "hard stop",
        "head_profile": {
            "kind": "brake",
            "v_high": 15.0, "v_low": 0.5, "a_brake": -5.0,
            "hold": 8.0, "a_recover": 2.0, "t_brake": 2.0
        },
        "duration": 31.15,
        "noise_seed": 1,
        "equilibrium_policy": {"policy": "rolling_mean"}
    });
    let cfg_path = write_config(&dir, &cfg);

    let out = run_cli(&["run", "--config", cfg_path.to_str().unwrap(), "--seed", "1"]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("collision"));
    assert!(dir.join("out/trajectory_all-hdv_1.csv").exists());

    let metrics: Value =
        serde_json::from_str(&fs::read_to_string(dir.join("out/metrics_all-hdv_1.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["collision"], json!(true));
}
