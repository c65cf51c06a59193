//! End-to-end CLI checks through the compiled binary.

use std::path::Path;
use std::process::Command;

fn compflow() -> Command {
    Command::new(env!("CARGO_BIN_EXE_compflow"))
}

fn run_dir_from(stdout: &[u8]) -> std::path::PathBuf {
    let text = String::from_utf8_lossy(stdout);
    Path::new(text.trim().lines().next().unwrap()).to_path_buf()
}

#[test]
fn benchgen_runs_and_passes_its_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = compflow()
        .args([
            "benchgen",
            "--out-dir",
            tmp.path().to_str().unwrap(),
            "--set",
            "bench.train_size=40",
            "--set",
            "bench.test_size=10",
            "--require-pass",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = run_dir_from(&out.stdout);
    assert!(dir.join("train.jsonl").exists());
    assert!(dir.join("dataset_manifest.json").exists());
}

#[test]
fn pretrain_then_emit_plots_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let out = compflow()
        .args([
            "rl-finetune",
            "--out-dir",
            tmp.path().to_str().unwrap(),
            "--set",
            "train.steps=300",
            "--set",
            "grpo.iterations=5",
            "--set",
            "grpo.group_size=4",
            "--set",
            "grpo.num_steps=8",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = run_dir_from(&out.stdout);
    let plots = compflow()
        .args(["emit-plots", dir.to_str().unwrap(), "--view", "reward-curve"])
        .output()
        .unwrap();
    assert!(plots.status.success());
    assert!(dir.join("reward_curve.csv").exists());
}

#[test]
fn config_file_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let config_path = tmp.path().join("config.toml");
    std::fs::write(&config_path, "seed = 5\n[train]\nsteps = 250\n").unwrap();
    let out = compflow()
        .args([
            "pretrain",
            "--config",
            config_path.to_str().unwrap(),
            "--out-dir",
            tmp.path().join("runs").to_str().unwrap(),
            "--seed",
            "9",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = run_dir_from(&out.stdout);
    assert!(dir.file_name().unwrap().to_str().unwrap().contains("seed9"));
    let resolved = std::fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(resolved.contains("steps = 250"));
}

#[test]
fn exit_codes_match_the_contract() {
    // unknown plot view -> config error (1)
    let out = compflow()
        .args(["emit-plots", "/nonexistent", "--view", "nope"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // valid view on a missing directory -> runtime failure (2)
    let out = compflow()
        .args(["emit-plots", "/nonexistent", "--view", "reward-curve"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // invalid config value -> config error (1)
    let tmp = tempfile::tempdir().unwrap();
    let out = compflow()
        .args([
            "pretrain",
            "--out-dir",
            tmp.path().to_str().unwrap(),
            "--set",
            "grpo.clip_epsilon=7.0",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // judge without a dataset -> config error (1), and no run directory
    let out = compflow()
        .args(["judge", "--out-dir", tmp.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn analyze_schedule_require_pass_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = compflow()
        .args([
            "analyze-schedule",
            "--out-dir",
            tmp.path().to_str().unwrap(),
            "--set",
            "mc_particles=2000",
            "--set",
            "mc_steps=200",
            "--set",
            "lyapunov_grid=256",
            "--require-pass",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = run_dir_from(&out.stdout);
    assert!(dir.join("optimality_report.json").exists());
}
