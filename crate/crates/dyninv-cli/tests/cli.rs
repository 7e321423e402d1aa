//! End-to-end tests of the binary: every subcommand is exercised through a
//! real process so flag parsing, exit codes, and artifact layout stay fixed.

use dyninv_core::harness::{config_toml, default_linear_config, RunConfig};
use dyninv_core::model::ScenarioMode;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dyninv"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf8 stderr")
}

/// 10x10 grid, 10 frames, two noise levels: large enough to exercise every
/// code path, small enough to keep the process tests quick.
fn small_config() -> RunConfig {
    let mut cfg = default_linear_config();
    cfg.scenario.mode = ScenarioMode::Grid { nx: 10, ny: 10 };
    cfg.scenario.total_frames = 10;
    cfg.scenario.ramp_frames = 7;
    cfg.deltas = vec![0.1, 0.01];
    cfg.seed = 5;
    cfg
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, config_toml(&small_config()).expect("serialises")).expect("writes");
    path
}

#[test]
fn help_lists_every_subcommand() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for sub in [
        "simulate",
        "solve-online",
        "solve-batch",
        "diagnose",
        "verify-lemmas",
        "reproduce-fig2",
    ] {
        assert!(text.contains(sub), "help is missing `{sub}`:\n{text}");
    }
}

#[test]
fn simulate_writes_deterministic_streams() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().expect("utf8 path");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let res = run(&["simulate", "--config", cfg, "--out", out.to_str().expect("utf8")]);
        assert!(res.status.success(), "simulate failed: {}", stderr(&res));
    }
    for name in ["truth.csv", "measurements_delta_0.1.csv", "measurements_delta_0.01.csv"] {
        let a = std::fs::read(out_a.join(name)).expect("first run artifact");
        let b = std::fs::read(out_b.join(name)).expect("second run artifact");
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    let truth = std::fs::read_to_string(out_a.join("truth.csv")).expect("truth");
    assert!(truth.starts_with("frame,index,value\n"));
    // 10 frames x 100 pixels plus the header line.
    assert_eq!(truth.lines().count(), 1 + 10 * 100);
    let meas = std::fs::read_to_string(out_a.join("measurements_delta_0.1.csv")).expect("meas");
    assert!(meas.starts_with("frame,index,exact,corrupted\n"));
    let noisy_rows = meas
        .lines()
        .skip(1)
        .filter(|l| {
            let mut cells = l.split(',').skip(2);
            let exact: f64 = cells.next().expect("exact").parse().expect("float");
            let corrupted: f64 = cells.next().expect("corrupted").parse().expect("float");
            exact != corrupted
        })
        .count();
    assert!(noisy_rows > 900, "corruption barely touched the stream: {noisy_rows}");
    // The resolved configuration is archived next to the data.
    assert!(out_a.join("config.toml").exists());
}

#[test]
fn solve_online_emits_the_schema_with_na_verdicts() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path());
    let out = dir.path().join("online");
    let res = run(&[
        "solve-online",
        "--config",
        cfg.to_str().expect("utf8"),
        "--out",
        out.to_str().expect("utf8"),
    ]);
    assert!(res.status.success(), "solve-online failed: {}", stderr(&res));
    let text = stdout(&res);
    assert!(text.contains("terminal error"), "missing summary line:\n{text}");
    for delta in ["0.1", "0.01"] {
        let csv =
            std::fs::read_to_string(out.join(format!("online_delta_{delta}.csv"))).expect("csv");
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some(
                "frame,delta,alpha,cum_avg_sq_error,bregman,data_fit,reg_value,\
                 e_increment,thm_lhs,thm_rhs,holds"
            )
        );
        let mut rows = 0;
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), 11, "bad row {line}");
            assert_eq!(cells[4], "NaN");
            assert_eq!(cells[10], "NA");
            let fit: f64 = cells[5].parse().expect("data fit");
            assert!(fit.is_finite() && fit >= 0.0);
            rows += 1;
        }
        assert_eq!(rows, 10);
    }
}

#[test]
fn solve_batch_reports_objectives_and_rejects_eit() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path());
    let out = dir.path().join("batch");
    let res = run(&[
        "solve-batch",
        "--config",
        cfg.to_str().expect("utf8"),
        "--out",
        out.to_str().expect("utf8"),
    ]);
    assert!(res.status.success(), "solve-batch failed: {}", stderr(&res));
    let csv = std::fs::read_to_string(out.join("batch_delta_0.1.csv")).expect("csv");
    assert!(csv.starts_with("frame,delta,alpha,objective\n"));
    assert_eq!(csv.lines().count(), 1 + 10);
    assert!(stdout(&res).contains("cumulative objective"));

    let res = bin()
        .args(["solve-batch", "--mode", "eit"])
        .arg("--out")
        .arg(dir.path().join("nope"))
        .output()
        .expect("binary runs");
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("unsupported"));
}

#[test]
fn diagnose_passes_and_writes_the_report_tree() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path());
    let out = dir.path().join("diag");
    let res = run(&[
        "diagnose",
        "--config",
        cfg.to_str().expect("utf8"),
        "--out",
        out.to_str().expect("utf8"),
    ]);
    assert!(res.status.success(), "diagnose failed: {}", stderr(&res));
    let text = stdout(&res);
    assert!(text.contains("all_pass: true"), "checks failed:\n{text}");
    assert!(text.contains("bregman-theorem"));
    for name in [
        "curve_delta_0.1.csv",
        "curve_delta_0.01.csv",
        "verdicts_delta_0.1.csv",
        "verdicts_delta_0.01.csv",
        "error_curves.svg",
        "summary.txt",
    ] {
        assert!(out.join(name).exists(), "missing artifact {name}");
    }
}

#[test]
fn verify_lemmas_passes_quickly_with_the_self_test() {
    let res = run(&["verify-lemmas", "--instances", "8", "--seed", "11", "--self-test"]);
    assert!(res.status.success(), "verify-lemmas failed: {}", stderr(&res));
    let text = stdout(&res);
    assert_eq!(text.matches(", pass").count(), 5, "expected five passing suites:\n{text}");
    assert!(text.contains("counterexample detection: ok"));
}

#[test]
fn mode_flag_conflicting_with_the_config_is_an_error() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path());
    let res = bin()
        .args(["simulate", "--mode", "eit", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .expect("binary runs");
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("--mode disagrees"));
}

#[test]
fn noise_and_seed_flags_override_the_config() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_config(dir.path());
    let out = dir.path().join("override");
    let res = run(&[
        "simulate",
        "--config",
        cfg.to_str().expect("utf8"),
        "--noise",
        "0.05",
        "--seed",
        "99",
        "--out",
        out.to_str().expect("utf8"),
    ]);
    assert!(res.status.success(), "simulate failed: {}", stderr(&res));
    assert!(out.join("measurements_delta_0.05.csv").exists());
    assert!(!out.join("measurements_delta_0.1.csv").exists());
    let archived = std::fs::read_to_string(out.join("config.toml")).expect("config");
    assert!(archived.contains("seed = 99"));
}
