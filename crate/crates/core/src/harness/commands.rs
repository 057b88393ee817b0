//! The operations behind each CLI subcommand. Outputs land under the
//! experiment's output directory:
//!
//! ```text
//! <out>/bundle.json  training.csv  disturbance.csv
//! <out>/montecarlo/  trajectories.csv  stats.csv  runs.csv  report.json  *.svg
//! <out>/robust/      same layout, robust backoffs
//! <out>/comparison.json
//! ```

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::montecarlo::{check_report, run_montecarlo, write_montecarlo, AcceptanceThresholds, CheckLine, MonteCarloReport};
use super::{io_err, robust_baseline, run_pipeline, run_sensitivity, Bundle, ExperimentConfig, HarnessError};
use super::{SensitivityConfig, SensitivityTable};

pub fn bundle_path(out: &Path) -> PathBuf {
    out.join("bundle.json")
}

/// Runs the offline stages and writes the bundle.
pub fn cmd_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<Bundle, HarnessError> {
    let bundle = run_pipeline(cfg, Some(out))?;
    bundle.write(&bundle_path(out))?;
    info!("bundle written to {}", bundle_path(out).display());
    Ok(bundle)
}

/// Reuses `<out>/bundle.json` when it was produced from this exact config.
pub fn load_or_build(cfg: &ExperimentConfig, out: &Path) -> Result<Bundle, HarnessError> {
    let path = bundle_path(out);
    if path.exists() {
        let b = Bundle::read(&path)?;
        if b.config_hash == cfg.hash() {
            info!("reusing {}", path.display());
            return Ok(b);
        }
        info!("{} was built from a different config; rebuilding", path.display());
    }
    cmd_pipeline(cfg, out)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(v).map_err(crate::io::IoError::from)?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

pub fn cmd_montecarlo(cfg: &ExperimentConfig, out: &Path) -> Result<MonteCarloReport, HarnessError> {
    let bundle = load_or_build(cfg, out)?;
    let controller = bundle.controller()?;
    let chance = cfg.constraints.state_polytope()?;
    let (records, report) =
        run_montecarlo(&controller, &cfg.plant, &cfg.montecarlo, &chance, &bundle.limit_box, bundle.montecarlo_seed())?;
    write_montecarlo(&out.join("montecarlo"), &records, &report, &chance)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dro_eta: Vec<f64>,
    pub robust_eta: Vec<f64>,
    pub dro_peak_mean: Vec<f64>,
    pub robust_peak_mean: Vec<f64>,
    pub dro_peak_q90: Vec<f64>,
    pub robust_peak_q90: Vec<f64>,
}

/// Robust-backoff Monte Carlo next to the distributionally robust one.
pub fn cmd_robust_baseline(cfg: &ExperimentConfig, out: &Path) -> Result<Comparison, HarnessError> {
    let bundle = load_or_build(cfg, out)?;
    let chance = cfg.constraints.state_polytope()?;
    let dro_path = out.join("montecarlo").join("report.json");
    let dro: MonteCarloReport = match read_json(&dro_path) {
        Ok(r) if report_matches(&r, cfg) => r,
        _ => cmd_montecarlo(cfg, out)?,
    };
    let base = robust_baseline(&bundle)?;
    let (records, report) =
        run_montecarlo(&base.controller, &cfg.plant, &cfg.montecarlo, &chance, &bundle.limit_box, bundle.montecarlo_seed())?;
    write_montecarlo(&out.join("robust"), &records, &report, &chance)?;
    let cmp = Comparison {
        dro_eta: bundle.eta().iter().copied().collect(),
        robust_eta: base.eta.iter().copied().collect(),
        dro_peak_mean: dro.peak_mean.clone(),
        robust_peak_mean: report.peak_mean.clone(),
        dro_peak_q90: dro.peak_q90.clone(),
        robust_peak_q90: report.peak_q90.clone(),
    };
    write_json(&out.join("comparison.json"), &cmp)?;
    Ok(cmp)
}

fn report_matches(r: &MonteCarloReport, cfg: &ExperimentConfig) -> bool {
    r.runs == cfg.montecarlo.runs && r.steps == cfg.montecarlo.steps
}

pub fn cmd_sensitivity(cfg: &SensitivityConfig, out: &Path) -> Result<SensitivityTable, HarnessError> {
    let table = run_sensitivity(cfg, Some(out))?;
    write_json(&out.join("sensitivity.json"), &table)?;
    Ok(table)
}

/// Reads `<out>/montecarlo/report.json` and evaluates the closed-loop checks.
/// The terminal-set invariance recorded in the bundle is checked too.
pub fn cmd_report(out: &Path) -> Result<(MonteCarloReport, Vec<CheckLine>), HarnessError> {
    let report: MonteCarloReport = read_json(&out.join("montecarlo").join("report.json"))?;
    let mut lines = check_report(&report, &AcceptanceThresholds::default());
    if let Ok(bundle) = Bundle::read(&bundle_path(out)) {
        lines.push(CheckLine {
            name: "terminal invariance".into(),
            pass: bundle.invariance.violations == 0 && bundle.invariance.samples >= 10_000,
            detail: format!("{} violations in {} samples", bundle.invariance.violations, bundle.invariance.samples),
        });
    }
    Ok((report, lines))
}
