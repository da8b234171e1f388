//! End-to-end tests of the `panelcausal` binary: exit codes, determinism
//! across worker counts, and the shape of emitted files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_panelcausal")
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("panelcausal_cli_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("study.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(binary()).args(args).env_remove("PANELCAUSAL_THREADS").output().unwrap()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn pipeline_reports_are_byte_identical_across_worker_counts() {
    let dir = temp_dir("det");
    let config = write_config(
        &dir,
        "[input]\nsynthetic = \"did_parallel\"\nn_firms = 120\n\n\
         [robustness]\nplacebo = 20\nevent_study = true\n",
    );
    let out1 = dir.join("run1");
    let out4 = dir.join("run4");

    let first = run(&[
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out1.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert!(first.status.success(), "{}", stderr_of(&first));
    let second = run(&[
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out4.to_str().unwrap(),
        "--threads",
        "4",
    ]);
    assert!(second.status.success(), "{}", stderr_of(&second));

    let json1 = std::fs::read(out1.join("report.json")).unwrap();
    let json4 = std::fs::read(out4.join("report.json")).unwrap();
    assert!(!json1.is_empty());
    assert_eq!(json1, json4, "reports differ across worker counts");

    let md1 = std::fs::read(out1.join("report.md")).unwrap();
    let md4 = std::fs::read(out4.join("report.md")).unwrap();
    assert_eq!(md1, md4);

    // The emitted JSON parses and carries the stage results it claims.
    let parsed: serde_json::Value = serde_json::from_slice(&json1).unwrap();
    assert_eq!(parsed["placebo"]["placebo_estimates"].as_array().unwrap().len(), 20);
    assert!(parsed["event_study"]["estimates"].as_array().unwrap().len() >= 7);
    assert!(parsed["manifest"]["config_hash"].as_str().unwrap().len() == 16);

    // The per-table CSVs were written alongside.
    assert!(out1.join("baseline.csv").exists());
    assert!(out1.join("placebo_draws.csv").exists());

    // The printed file list names everything that exists.
    let stdout = String::from_utf8_lossy(&first.stdout);
    assert!(stdout.lines().count() >= 3);
    for line in stdout.lines() {
        assert!(Path::new(line.trim()).exists(), "missing listed file {line}");
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn seed_override_changes_the_synthetic_draw() {
    let dir = temp_dir("seed");
    let config =
        write_config(&dir, "[input]\nsynthetic = \"did_parallel\"\nn_firms = 100\n");
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    let a = run(&[
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_a.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert!(a.status.success(), "{}", stderr_of(&a));
    let b = run(&[
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
        "--seed",
        "8",
    ]);
    assert!(b.status.success(), "{}", stderr_of(&b));
    let json_a = std::fs::read(out_a.join("report.json")).unwrap();
    let json_b = std::fs::read(out_b.join("report.json")).unwrap();
    assert_ne!(json_a, json_b, "different seeds produced identical reports");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn conflicting_inputs_exit_with_the_config_code() {
    let dir = temp_dir("conflict");
    let config = write_config(
        &dir,
        "[input]\nsynthetic = \"did_parallel\"\ncsv = \"also.csv\"\n",
    );
    let out = run(&["pipeline", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("mutually exclusive"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn missing_csv_exits_with_the_data_code() {
    let dir = temp_dir("nocsv");
    let config = write_config(&dir, "[input]\ncsv = \"/nonexistent/panel.csv\"\n");
    let out = run(&["did", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("[stage load]"), "{}", stderr_of(&out));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn a_singular_system_exits_with_the_estimation_code() {
    let dir = temp_dir("singular");
    let config = write_config(
        &dir,
        "[input]\nsynthetic = \"sur_system\"\nn_firms = 150\n\n\
         [sur]\nenabled = true\noutcomes = [\"DebtFC\", \"DebtFC\"]\nequality_signs = []\n",
    );
    let out = run(&["sur", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("[stage sur]"), "{}", stderr_of(&out));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn report_prints_the_full_markdown_document() {
    let dir = temp_dir("report");
    let config =
        write_config(&dir, "[input]\nsynthetic = \"did_parallel\"\nn_firms = 100\n");
    let out = run(&["report", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("# Study report"));
    assert!(stdout.contains("## baseline"));
    assert!(stdout.contains("treat_post"));
    assert!(stdout.contains("Significance: *** p < 0.01"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn simulate_writes_the_panel_and_its_ground_truth() {
    let dir = temp_dir("simulate");
    let out_dir = dir.join("sim");
    let config =
        write_config(&dir, "[input]\nsynthetic = \"selection\"\nn_firms = 80\n");
    let out = run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let panel = std::fs::read_to_string(out_dir.join("panel.csv")).unwrap();
    assert!(panel.lines().count() > 80, "panel has too few rows");
    assert!(panel.lines().next().unwrap().contains("firm_id"));
    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("truth.json")).unwrap())
            .unwrap();
    assert!(truth["beta_treat"].is_number());
    assert!(truth["treated_firms"].is_array());
    assert!(truth["selection"].is_object());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn clean_and_wash_write_intermediates_that_chain_into_did() {
    let dir = temp_dir("chain");
    let sim_dir = dir.join("sim");
    let sim_config =
        write_config(&dir, "[input]\nsynthetic = \"did_parallel\"\nn_firms = 90\n");
    let sim = run(&[
        "simulate",
        "--config",
        sim_config.to_str().unwrap(),
        "--out",
        sim_dir.to_str().unwrap(),
    ]);
    assert!(sim.status.success(), "{}", stderr_of(&sim));

    // Point a CSV config at the simulated panel.
    let csv_path = sim_dir.join("panel.csv");
    let csv_config_path = dir.join("csv_study.toml");
    std::fs::write(
        &csv_config_path,
        format!("[input]\ncsv = \"{}\"\n", csv_path.display()),
    )
    .unwrap();

    let clean_dir = dir.join("cleaned");
    let clean = run(&[
        "clean",
        "--config",
        csv_config_path.to_str().unwrap(),
        "--out",
        clean_dir.to_str().unwrap(),
    ]);
    assert!(clean.status.success(), "{}", stderr_of(&clean));
    assert!(clean_dir.join("screened.csv").exists());
    assert!(clean_dir.join("screening.json").exists());
    let stdout = String::from_utf8_lossy(&clean.stdout);
    assert!(stdout.contains("rows before:"), "{stdout}");

    let wash_dir = dir.join("washed");
    let wash = run(&[
        "wash",
        "--config",
        csv_config_path.to_str().unwrap(),
        "--out",
        wash_dir.to_str().unwrap(),
    ]);
    assert!(wash.status.success(), "{}", stderr_of(&wash));
    let washed = std::fs::read_to_string(wash_dir.join("washed.csv")).unwrap();
    let header = washed.lines().next().unwrap();
    assert!(header.contains("wash_residual") && header.contains("treat_hat"), "{header}");
    assert!(wash_dir.join("assignment.json").exists());

    // The washed panel, treated as a fresh CSV input, supports estimation.
    let did_config_path = dir.join("did_study.toml");
    std::fs::write(
        &did_config_path,
        format!("[input]\ncsv = \"{}\"\n", wash_dir.join("washed.csv").display()),
    )
    .unwrap();
    let did = run(&["did", "--config", did_config_path.to_str().unwrap()]);
    assert!(did.status.success(), "{}", stderr_of(&did));
    assert!(String::from_utf8_lossy(&did.stdout).contains("treat_post"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn stage_subcommands_force_only_their_stage() {
    let dir = temp_dir("stages");
    // Config turns placebo on; `event` must not run it, and `placebo`
    // must honor the configured draw count.
    let config = write_config(
        &dir,
        "[input]\nsynthetic = \"did_parallel\"\nn_firms = 100\n\n[robustness]\nplacebo = 7\n",
    );
    let event = run(&["event", "--config", config.to_str().unwrap()]);
    assert!(event.status.success(), "{}", stderr_of(&event));
    let stdout = String::from_utf8_lossy(&event.stdout);
    assert!(stdout.contains("## event study"), "{stdout}");
    assert!(!stdout.contains("placebo"), "{stdout}");

    let placebo = run(&["placebo", "--config", config.to_str().unwrap()]);
    assert!(placebo.status.success(), "{}", stderr_of(&placebo));
    let stdout = String::from_utf8_lossy(&placebo.stdout);
    assert!(stdout.contains("| draws | 7 |"), "{stdout}");

    let moderate = run(&["moderate", "--config", config.to_str().unwrap()]);
    assert_eq!(moderate.status.code(), Some(2), "no moderators must be a config error");

    let split = run(&[
        "split",
        "--config",
        config.to_str().unwrap(),
        "--split",
        "Size",
        "--draws",
        "10",
    ]);
    assert!(split.status.success(), "{}", stderr_of(&split));
    assert!(String::from_utf8_lossy(&split.stdout).contains("Size"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn the_thread_environment_override_must_be_numeric() {
    let dir = temp_dir("env");
    let config =
        write_config(&dir, "[input]\nsynthetic = \"did_parallel\"\nn_firms = 80\n");
    let out = Command::new(binary())
        .args(["did", "--config", config.to_str().unwrap()])
        .env("PANELCAUSAL_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("PANELCAUSAL_THREADS"));
    std::fs::remove_dir_all(&dir).ok();
}
