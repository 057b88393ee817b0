use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kmpc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../experiments/toy_linear.toml")
}

fn write_variant(dir: &Path, from: &str, to: &str) -> PathBuf {
    let text = std::fs::read_to_string(toy_config()).unwrap();
    assert!(text.contains(from), "toy config lacks {from:?}");
    let path = dir.join("variant.toml");
    std::fs::write(&path, text.replace(from, to)).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_config_exits_2() {
    let o = kmpc(&["pipeline", "--config", "/nonexistent/config.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot read"));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_variant(dir.path(), "horizon = 5", "horizon = 0");
    let o = kmpc(&["pipeline", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failing_stage_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // The backoff alone exceeds this constraint, so the state tube is empty.
    let cfg = write_variant(dir.path(), "f_rhs = [0.4]", "f_rhs = [0.001]");
    let o = kmpc(&["pipeline", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tubes"));
}

#[test]
fn full_run_then_report_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = toy_config();
    let cfg = cfg.to_str().unwrap();

    let o = kmpc(&["pipeline", "--config", cfg, "--out", out, "--threads", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("eta[0]"));

    let o = kmpc(&["montecarlo", "--config", cfg, "--out", out, "--runs", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("runs 10"));

    let o = kmpc(&["report", "--out", out, "--check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 5, "{text}");

    // Corrupt the report so a check fails.
    let path = dir.path().join("montecarlo/report.json");
    let mut report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    report["infeasible_runs"] = serde_json::json!(3);
    std::fs::write(&path, report.to_string()).unwrap();
    let o = kmpc(&["report", "--out", out, "--check"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).contains("FAIL recursive feasibility"));
    // Without --check the summary still succeeds.
    assert_eq!(kmpc(&["report", "--out", out]).status.code(), Some(0));
}

#[test]
fn robust_baseline_writes_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = kmpc(&["robust-baseline", "--config", toy_config().to_str().unwrap(), "--out", out, "--runs", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cmp: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("comparison.json")).unwrap()).unwrap();
    let (dro, robust) = (cmp["dro_eta"][0].as_f64().unwrap(), cmp["robust_eta"][0].as_f64().unwrap());
    assert!(robust >= dro);
    assert!(dir.path().join("robust/stats.csv").exists());
}

#[test]
fn sensitivity_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sens.toml");
    std::fs::write(
        &cfg,
        r#"
name = "small"
seed = 1
output_dir = "unused"
alpha = 0.1
sample_sizes = [10, 50]
radii = [0.1, 1e-4]
[distribution]
kind = "uniform"
lo = -0.1
hi = 0.1
"#,
    )
    .unwrap();
    let o = kmpc(&["sensitivity", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("sensitivity.csv").exists());
    assert_eq!(stdout(&o).lines().count(), 3);
}
