use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pipefreeze_cli::error::CliError;
use pipefreeze_core::Error;
use serde_json::Value;

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pipefreeze")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap()
}

#[test]
fn optimize_writes_plan_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["optimize", "--config", &fixture("gpipe_s2m2.json"), "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["plan.json", "report.json", "dag.json", "timing.json", "lp.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let plan = read_json(dir.path().join("plan.json"));
    assert!((plan["makespan_opt"].as_f64().unwrap() - 7.0).abs() < 1e-7);
    assert_eq!(plan["makespan_base"].as_f64().unwrap(), 9.0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("Avg Frz. Ratio"), "{text}");
}

#[test]
fn missing_config_is_a_config_error() {
    let o = run(&["optimize", "--config", "/nonexistent/run.json"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.starts_with("error[config]: "), "{e}");
    assert_eq!(e.trim_end().lines().count(), 1, "{e}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]: "), "{}", stderr(&o));
}

#[test]
fn malformed_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = fs::read_to_string(fixture("gpipe_s2m2.json")).unwrap();
    fs::write(&path, text.replace("\"num_microbatches\": 2", "\"num_microbatches\": \"two\"")).unwrap();
    let o = run(&["optimize", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("pipeline.num_microbatches"), "{e}");
    assert_eq!(e.trim_end().lines().count(), 1, "{e}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = fs::read_to_string(fixture("gpipe_s2m2.json")).unwrap();
    fs::write(&path, text.replace("\"r_max\"", "\"r_maximum\"")).unwrap();
    let o = run(&["optimize", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("r_maximum"), "{}", stderr(&o));
}

#[test]
fn out_of_range_r_max_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = fs::read_to_string(fixture("gpipe_s2m2.json")).unwrap();
    fs::write(&path, text.replace("\"r_max\": 0.5", "\"r_max\": 1.5")).unwrap();
    let o = run(&["optimize", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[config]: "));
}

#[test]
fn lp_errors_exit_with_three() {
    let e = CliError::lp(Error::Numerical("cycling".into()));
    assert_eq!(e.exit_code(), 3);
    assert_eq!(e.to_string(), "error[lp]: LP solver failed: cycling");
}

#[test]
fn mismatched_plan_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(run(&["optimize", "--config", &fixture("gpipe_s2m2.json"), "--out", out]).status.success());
    let plan = dir.path().join("plan.json");
    let o = run(&["simulate", "--config", &fixture("gpipe_s4m8.json"), "--plan", plan.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stages"), "{}", stderr(&o));
}

#[test]
fn simulate_follows_the_ramp() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture("gpipe_s2m2.json");
    let at = |step: &str| {
        let out = dir.path().join(step);
        let o = run(&["simulate", "--config", &config, "--step", step, "--out", out.to_str().unwrap(), "--svg"]);
        assert!(o.status.success(), "{}", stderr(&o));
        read_json(out.join("simulate.json"))
    };
    // Warm-up, mid-ramp and stable freezing.
    assert_eq!(at("100")["optimized_ms"].as_f64().unwrap(), 9.0);
    let mid = at("225");
    assert_eq!(mid["phase"], "progressive_freeze");
    // Plan ratios carry the solver tolerance.
    assert!((mid["optimized_ms"].as_f64().unwrap() - 8.0).abs() < 1e-6);
    assert!((at("300")["optimized_ms"].as_f64().unwrap() - 7.0).abs() < 1e-7);
    let svg = fs::read_to_string(dir.path().join("225/optimized.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    let csv = fs::read_to_string(dir.path().join("300/mask_frequency.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("stage,index,frequency"));
}

#[test]
fn gantt_blocks_match_makespan_without_overlap() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["gpipe_s4m8.json", "1f1b_s4m8.json", "interleaved_r2c2m4.json", "zbv_r2m4.json"] {
        let out = dir.path().join(name);
        let o = run(&["gantt", "--config", &fixture(name), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        let g = read_json(out.join("gantt.json"));
        let blocks = g["blocks"].as_array().unwrap();
        let end = blocks.iter().map(|b| b["end_ms"].as_f64().unwrap()).fold(0.0, f64::max);
        assert!((end - g["makespan_ms"].as_f64().unwrap()).abs() < 1e-9, "{name}");
        for rank in 0..g["num_ranks"].as_u64().unwrap() {
            let mut spans: Vec<(f64, f64)> = blocks
                .iter()
                .filter(|b| b["rank"].as_u64() == Some(rank))
                .map(|b| (b["start_ms"].as_f64().unwrap(), b["end_ms"].as_f64().unwrap()))
                .collect();
            spans.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in spans.windows(2) {
                assert!(w[0].1 <= w[1].0 + 1e-9, "{name} rank {rank}: {w:?}");
            }
        }
    }
}

#[test]
fn sandbox_scaling_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["sandbox", "--dim", "20", "--eps", "1e-2", "--trials", "4", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("sandbox.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "p,trials,mean_T_eps,ratio,p_eff_hat");
    assert_eq!(lines.len(), 4, "{csv}");
}

#[test]
fn sandbox_rejects_unstable_stepsize() {
    let o = run(&["sandbox", "--dim", "10", "--eta", "5", "--trials", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stepsize"), "{}", stderr(&o));
}

#[test]
fn tta_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(run(&["optimize", "--config", &fixture("gpipe_s2m2.json"), "--out", out]).status.success());
    let plan = dir.path().join("plan.json");
    let o = run(&["sandbox", "--plan", plan.to_str().unwrap(), "--dim", "16", "--eps", "1e-2", "--trials", "4", "--microbatches", "2", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tta = dir.path().join("tta.json");
    let o = run(&["report", "--plan", plan.to_str().unwrap(), "--tta", tta.to_str().unwrap(), "--out", out, "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["p_eff_source"], "sandbox");
    assert!(report["measured_tta_ratio"].as_f64().is_some());
}
