use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use olora::harness::{ExperimentSummary, RunConfig, RunSummary};
use tempfile::TempDir;

fn olora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_olora"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Short default-shaped run: every flag but the step counts left alone.
fn quick_run(dir: &Path, method: &str, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec![
        "run", "--method", method, "--tasks", "3", "--seed", "0", "--steps", "40,20", "--out", out,
    ];
    args.extend_from_slice(extra);
    olora(&args)
}

fn run_summary(dir: &Path, name: &str) -> RunSummary {
    serde_json::from_str(
        &fs::read_to_string(dir.join("runs").join(name).join("summary.json")).unwrap(),
    )
    .unwrap()
}

#[test]
fn run_writes_a_square_evaluation_matrix_and_artifacts() {
    let tmp = TempDir::new().unwrap();
    let out = quick_run(tmp.path(), "o_lora", &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let s = run_summary(tmp.path(), "o_lora-seed0");
    assert_eq!(s.eval_matrix.len(), 3);
    assert!(s.eval_matrix.iter().all(|row| row.len() == 3));
    let run_dir = tmp.path().join("runs/o_lora-seed0");
    assert!(run_dir.join("checkpoint.json").exists());
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(
        "stage,step,task_loss,orth_loss,adalora_reg,distill_loss,total,total_rank,active_ranks"
    ));
    let status = fs::read_to_string(tmp.path().join("status.json")).unwrap();
    assert!(status.contains("\"complete\""));
}

#[test]
fn config_echo_reproduces_the_resolved_config() {
    let tmp = TempDir::new().unwrap();
    let out = quick_run(
        tmp.path(),
        "o_adalora",
        &["--lambda1", "0.25", "--rank-init", "10"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let echoed = RunConfig::load(&tmp.path().join("config.json")).unwrap();
    assert_eq!(echoed.lambda1, 0.25);
    assert_eq!(echoed.rank_init, 10);
    assert_eq!(echoed.train.steps_first, 40);
    let summary = ExperimentSummary::load(&tmp.path().join("summary.json")).unwrap();
    assert_eq!(summary.config, echoed);

    // feeding the echo back in resolves to the same config
    let printed = olora(&[
        "run",
        "--config",
        tmp.path().join("config.json").to_str().unwrap(),
        "--print-config",
    ]);
    assert_eq!(code(&printed), 0);
    assert_eq!(
        RunConfig::from_json(&String::from_utf8(printed.stdout).unwrap()).unwrap(),
        echoed
    );
}

#[test]
fn replay_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let files: Vec<String> = ["summary.json".to_string()]
        .into_iter()
        .chain(["o_adalora-seed0", "lwf-seed0"].iter().flat_map(|name| {
            ["summary.json", "metrics.csv", "checkpoint.json"].map(|f| format!("runs/{name}/{f}"))
        }))
        .collect();
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let out = quick_run(tmp.path(), "o_adalora,lwf", &[]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        snapshots.push(
            files
                .iter()
                .map(|f| fs::read(tmp.path().join(f)).unwrap())
                .collect::<Vec<_>>(),
        );
    }
    for (i, f) in files.iter().enumerate() {
        assert!(
            snapshots[0][i] == snapshots[1][i],
            "{f} differs between replays"
        );
    }
}

#[test]
fn adalora_run_reports_target_total_rank() {
    let tmp = TempDir::new().unwrap();
    let out = quick_run(tmp.path(), "o_adalora", &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let s = run_summary(tmp.path(), "o_adalora-seed0");
    // two blocks × six adapted projections
    assert_eq!(s.final_total_rank, Some(8 * 12));
}

#[test]
fn invalid_configs_exit_with_code_one_and_name_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"lambda1": 0.5, "rank_initial": 12}"#).unwrap();
    let out = olora(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("rank_initial"), "{}", stderr(&out));

    let out = olora(&[
        "run",
        "--lambda1",
        "-1",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("lambda1"), "{}", stderr(&out));

    let out = olora(&["run", "--rank-init", "4", "--rank-target", "8"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("rank_target"), "{}", stderr(&out));

    let out = olora(&["run", "--method", "ewc"]);
    assert_eq!(code(&out), 1);
    let out = olora(&["run", "--no-such-flag"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn divergence_exits_with_code_three_and_flags_the_status() {
    let tmp = TempDir::new().unwrap();
    let out = quick_run(tmp.path(), "seq_ft", &["--lr", "1e3"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
    let status = fs::read_to_string(tmp.path().join("status.json")).unwrap();
    assert!(status.contains("\"failed\""));
    assert!(!tmp.path().join("summary.json").exists());
}

#[test]
fn comparing_a_summary_with_itself_gives_zero_deltas() {
    let tmp = TempDir::new().unwrap();
    let out = quick_run(tmp.path(), "o_lora,o_adalora", &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = tmp.path().join("summary.json");
    let table = tmp.path().join("table.json");
    let s = summary.to_str().unwrap();
    let out = olora(&["compare", s, s, "--out", table.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("PASS  fraction(o_adalora) < fraction(o_lora)"),
        "{stdout}"
    );
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(table).unwrap()).unwrap();
    for row in v["rows"].as_array().unwrap() {
        for key in ["delta_forgetting", "delta_final_loss", "delta_fraction"] {
            assert_eq!(row[key].as_f64(), Some(0.0), "{key}");
        }
    }
}

#[test]
fn comparing_different_suites_is_an_error() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    assert_eq!(code(&quick_run(a.path(), "o_lora", &[])), 0);
    let out = olora(&[
        "run",
        "--method",
        "o_lora",
        "--tasks",
        "2",
        "--seed",
        "0",
        "--steps",
        "40,20",
        "--out",
        b.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = olora(&[
        "compare",
        a.path().join("summary.json").to_str().unwrap(),
        b.path().join("summary.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(
        stderr(&out).contains("comparison error"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn gradcheck_passes_and_reports_filters() {
    let out = olora(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let out = olora(&["gradcheck", "--mode", "lora"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("SKIP  term:adalora_reg"), "{stdout}");
    assert!(stdout.contains("PASS  loss:lora"), "{stdout}");
}

#[test]
fn corrupted_backward_rule_fails_the_gradcheck() {
    for op in ["matmul", "row_softmax", "mul_row"] {
        let out = olora(&["gradcheck", "--corrupt-op", op]);
        assert_eq!(code(&out), 2, "{op}");
        assert!(String::from_utf8_lossy(&out.stdout).contains(&format!("FAIL  op:{op}")));
    }
}
