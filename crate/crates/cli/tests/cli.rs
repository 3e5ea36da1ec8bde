use std::path::Path;
use std::process::{Command, Output};

fn skelfuse(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skelfuse"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("SKELFUSE_SEED")
        .env_remove("SKELFUSE_OUT")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

const TINY: &str = "\
samples_per_class=3
frames=8
P=8
S=32
gcn_layers=8:1,8:2
rgb_stem=8:3:1
rgb_stages=8x1
epochs=3
decay_epochs=1,2
batch=4
";

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(skelfuse(dir.path(), &["frobnicate"]).status.code(), Some(1));
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let out = skelfuse(dir.path(), &["--version"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("-g"));
    assert_eq!(skelfuse(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = skelfuse(dir.path(), &["--config", "/nonexistent/run.cfg", "gen-synthetic"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
}

#[test]
fn bogus_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs=3\nwobble=1\n");
    let out = skelfuse(dir.path(), &["--config", &cfg, "gen-synthetic"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("wobble") && err.contains("line 2"), "{err}");
}

#[test]
fn stage_without_inputs_reports_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = skelfuse(dir.path(), &["--config", &cfg, "train-skeleton"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = skelfuse(dir.path(), &["--seed", "3", "grad-check"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.contains(" ok ")).count(), 10, "{text}");
    assert!(dir.path().join("config/grad-check.cfg").exists());
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let steps: &[&[&str]] = &[
        &["gen-synthetic"],
        &["train-skeleton"],
        &["build-stroi"],
        &["extract-weights"],
        &["train-rgb", "--mode", "none"],
        &["train-rgb", "--mode", "fixed"],
        &["train-rgb", "--mode", "soft"],
        &["ensemble", "--mode", "fixed"],
        &["evaluate", "--mode", "fixed"],
    ];
    for step in steps {
        let mut args = vec!["--config", cfg.as_str(), "--seed", "42"];
        args.extend_from_slice(step);
        let out = skelfuse(dir.path(), &args);
        assert_eq!(out.status.code(), Some(0), "{step:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for file in [
        "data/manifest.json",
        "skeleton/model.skfz",
        "skeleton/metrics.jsonl",
        "stroi/grids.skfz",
        "weights/part_weights.skfz",
        "rgb-fixed/model.skfz",
        "rgb-soft/skeleton.skfz",
        "ensemble-fixed.txt",
        "report.txt",
    ] {
        assert!(dir.path().join(file).exists(), "{file} missing");
    }
    let echo = std::fs::read_to_string(dir.path().join("config/train-skeleton.cfg")).unwrap();
    assert!(echo.contains("seed 42") && echo.contains("epochs=3"), "{echo}");
}

#[test]
fn in_process_run_matches_binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    let mut log = Vec::new();
    let err = skelfuse_cli::run_args(["skelfuse", "--out", &out, "evaluate", "--mode", "soft"], &mut log).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = skelfuse_cli::run_args(["skelfuse", "--seed", "x", "grad-check"], &mut log).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}
