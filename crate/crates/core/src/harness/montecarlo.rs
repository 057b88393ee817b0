use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::MonteCarloConfig;
use super::svg::{self, Chart, Series};
use super::{io_err, HarnessError};
use crate::controller::{Controller, ControllerError};
use crate::geometry::{Box, HPolytope};
use crate::io::Table;
use crate::plant::{step, stream_rng, PlantSpec, Trajectory};

/// One closed-loop realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub trajectory: Trajectory,
    /// Step at which the MPC problem had no solution; the run stops there.
    pub infeasible_at: Option<usize>,
    /// Consecutive feasible pairs whose shifted sequence was checked.
    pub shift_checks: usize,
    pub shift_failures: usize,
    pub max_shift_violation: f64,
    /// `max_k (J_{k+1} − J_k)`.
    pub max_cost_increase: f64,
    /// `‖c*_{0|k}‖` at the last solved step.
    pub final_c0: f64,
}

pub fn simulate_run<R: rand::Rng + ?Sized>(
    controller: &Controller,
    plant: &PlantSpec,
    x0: &DVector<f64>,
    steps: usize,
    rng: &mut R,
) -> Result<RunRecord, HarnessError> {
    let mut rec = RunRecord {
        trajectory: Trajectory { states: vec![x0.clone()], ..Default::default() },
        infeasible_at: None,
        shift_checks: 0,
        shift_failures: 0,
        max_shift_violation: f64::NEG_INFINITY,
        max_cost_increase: f64::NEG_INFINITY,
        final_c0: f64::NAN,
    };
    let mut x = x0.clone();
    let mut prev = None;
    for k in 0..steps {
        let clock = Instant::now();
        let result = controller.control_step(&x);
        let elapsed = clock.elapsed().as_secs_f64();
        let (u, sol) = match result {
            Ok(v) => v,
            Err(ControllerError::InfeasibleAtState { first_violation, .. }) => {
                log::debug!("run infeasible at step {k} (x = {:?}); first violation {first_violation}", x.as_slice());
                rec.infeasible_at = Some(k);
                break;
            }
            Err(e) => return Err(HarnessError::stage("control", e)),
        };
        if let Some(p) = &prev {
            let s = controller.model.dictionary.lift(&x).map_err(|e| HarnessError::stage("control", e))?;
            let (ok, v) = controller.shifted_candidate(p, &s);
            rec.shift_checks += 1;
            rec.shift_failures += usize::from(!ok);
            rec.max_shift_violation = rec.max_shift_violation.max(v);
        }
        if let Some(last) = rec.trajectory.objective.last() {
            rec.max_cost_increase = rec.max_cost_increase.max(sol.objective - last);
        }
        rec.final_c0 = sol.c.row(0).norm();
        let (next, w) = step(plant, &x, &u, rng).map_err(|e| HarnessError::stage("simulate", e))?;
        rec.trajectory.inputs.push(u);
        rec.trajectory.disturbances.push(w);
        rec.trajectory.objective.push(sol.objective);
        rec.trajectory.solve_time.push(elapsed);
        rec.trajectory.states.push(next.clone());
        x = next;
        prev = Some(sol);
    }
    Ok(rec)
}

/// Aggregated closed-loop statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub runs: usize,
    pub steps: usize,
    pub chance_level: f64,
    /// `[k][j]`: fraction of runs alive at step `k` with `F_j x_k ≤ f_j`.
    pub satisfaction: Vec<Vec<f64>>,
    /// Per row, the minimum over `k ≥ 1`.
    pub min_satisfaction: Vec<f64>,
    /// Runs reaching step `k`.
    pub alive: Vec<usize>,
    pub mean: Vec<Vec<f64>>,
    pub q90: Vec<Vec<f64>>,
    /// Per coordinate, the largest mean over time.
    pub peak_mean: Vec<f64>,
    pub peak_q90: Vec<f64>,
    pub infeasible_runs: usize,
    pub shift_checks: usize,
    pub shift_failures: usize,
    pub max_shift_violation: f64,
    pub max_cost_increase: f64,
    pub solve_time_mean: f64,
    pub solve_time_std: f64,
    pub solve_time_p95: f64,
    /// Norm of the mean trajectory at `T`.
    pub mean_terminal_norm: f64,
    /// `‖x_T‖` averaged over runs that completed.
    pub terminal_norm_mean: f64,
    pub terminal_norm_max: f64,
    /// Completed runs whose `x_T` lies in the limit box grown by `1e-6`.
    pub terminal_in_limit: usize,
    pub completed_runs: usize,
    pub final_c0_max: f64,
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty data");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn aggregate(
    records: &[RunRecord],
    steps: usize,
    chance: &HPolytope,
    chance_level: f64,
    limit_box: &Box,
) -> MonteCarloReport {
    let nx = records.first().map_or(0, |r| r.trajectory.states[0].len());
    let rows = chance.nrows();
    let mut satisfaction = Vec::with_capacity(steps + 1);
    let mut alive = Vec::with_capacity(steps + 1);
    let mut mean = Vec::with_capacity(steps + 1);
    let mut q90 = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let xs: Vec<&DVector<f64>> = records.iter().filter_map(|r| r.trajectory.states.get(k)).collect();
        alive.push(xs.len());
        if xs.is_empty() {
            satisfaction.push(vec![f64::NAN; rows]);
            mean.push(vec![f64::NAN; nx]);
            q90.push(vec![f64::NAN; nx]);
            continue;
        }
        let n = xs.len() as f64;
        satisfaction.push(
            (0..rows)
                .map(|j| {
                    let a = chance.h.row(j);
                    xs.iter().filter(|x| (a * **x)[(0, 0)] <= chance.b[j]).count() as f64 / n
                })
                .collect(),
        );
        mean.push((0..nx).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n).collect());
        q90.push((0..nx).map(|i| quantile(&xs.iter().map(|x| x[i]).collect::<Vec<_>>(), 0.9)).collect());
    }
    let finite_max = |it: &mut dyn Iterator<Item = f64>| it.filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let min_satisfaction = (0..rows)
        .map(|j| satisfaction[1..].iter().map(|s| s[j]).filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min))
        .collect();
    let peak_mean = (0..nx).map(|i| finite_max(&mut mean.iter().map(|m| m[i]))).collect();
    let peak_q90 = (0..nx).map(|i| finite_max(&mut q90.iter().map(|m| m[i]))).collect();
    let times: Vec<f64> = records.iter().flat_map(|r| r.trajectory.solve_time.iter().copied()).collect();
    let (tm, ts) = mean_std(&times);
    let completed: Vec<&RunRecord> = records.iter().filter(|r| r.trajectory.steps() == steps).collect();
    let norms: Vec<f64> = completed.iter().map(|r| r.trajectory.states[steps].norm()).collect();
    let grown = limit_box.inflate(1e-6);
    let mean_terminal_norm = mean.last().map_or(f64::NAN, |m| m.iter().map(|v| v * v).sum::<f64>().sqrt());
    MonteCarloReport {
        runs: records.len(),
        steps,
        chance_level,
        satisfaction,
        min_satisfaction,
        alive,
        mean,
        q90,
        peak_mean,
        peak_q90,
        infeasible_runs: records.iter().filter(|r| r.infeasible_at.is_some()).count(),
        shift_checks: records.iter().map(|r| r.shift_checks).sum(),
        shift_failures: records.iter().map(|r| r.shift_failures).sum(),
        max_shift_violation: finite_max(&mut records.iter().map(|r| r.max_shift_violation)),
        max_cost_increase: finite_max(&mut records.iter().map(|r| r.max_cost_increase)),
        solve_time_mean: tm,
        solve_time_std: ts,
        solve_time_p95: if times.is_empty() { f64::NAN } else { quantile(&times, 0.95) },
        mean_terminal_norm,
        terminal_norm_mean: mean_std(&norms).0,
        terminal_norm_max: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        terminal_in_limit: completed.iter().filter(|r| grown.contains(&r.trajectory.states[steps], 0.0)).count(),
        completed_runs: completed.len(),
        final_c0_max: finite_max(&mut records.iter().map(|r| r.final_c0)),
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Independent runs in parallel, one RNG stream per run.
pub fn run_montecarlo(
    controller: &Controller,
    plant: &PlantSpec,
    mc: &MonteCarloConfig,
    chance: &HPolytope,
    limit_box: &Box,
    seed: u64,
) -> Result<(Vec<RunRecord>, MonteCarloReport), HarnessError> {
    let x0 = DVector::from_vec(mc.x0.clone());
    let records: Vec<RunRecord> = (0..mc.runs)
        .into_par_iter()
        .map(|r| simulate_run(controller, plant, &x0, mc.steps, &mut stream_rng(seed, r as u64)))
        .collect::<Result<_, _>>()?;
    let report = aggregate(&records, mc.steps, chance, mc.chance_level, limit_box);
    Ok((records, report))
}

/// Writes `trajectories.csv`, `stats.csv`, `runs.csv`, `report.json` and
/// one SVG chart per state coordinate plus the satisfaction chart.
pub fn write_montecarlo(
    dir: &Path,
    records: &[RunRecord],
    report: &MonteCarloReport,
    chance: &HPolytope,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let nx = report.mean.first().map_or(0, Vec::len);
    let nu = records.iter().find_map(|r| r.trajectory.inputs.first()).map_or(0, |u| u.len());
    let rows = chance.nrows();

    let mut header = vec!["run".to_string(), "k".to_string()];
    header.extend((1..=nx).map(|i| format!("x{i}")));
    header.extend((1..=nu).map(|i| format!("u{i}")));
    header.push("objective".into());
    header.push("solve_time".into());
    let mut traj = Table::new(header);
    for (r, rec) in records.iter().enumerate() {
        let t = &rec.trajectory;
        for (k, x) in t.states.iter().enumerate() {
            let mut row = vec![r as f64, k as f64];
            row.extend(x.iter());
            match t.inputs.get(k) {
                Some(u) => row.extend(u.iter()),
                None => row.extend(std::iter::repeat_n(f64::NAN, nu)),
            }
            row.push(t.objective.get(k).copied().unwrap_or(f64::NAN));
            row.push(t.solve_time.get(k).copied().unwrap_or(f64::NAN));
            traj.push(row);
        }
    }
    traj.write_csv(&dir.join("trajectories.csv"))?;

    let mut header = vec!["k".to_string(), "alive".to_string()];
    header.extend((1..=nx).map(|i| format!("mean_x{i}")));
    header.extend((1..=nx).map(|i| format!("q90_x{i}")));
    header.extend((1..=rows).map(|j| format!("sat_c{j}")));
    let mut stats = Table::new(header);
    for k in 0..=report.steps {
        let mut row = vec![k as f64, report.alive[k] as f64];
        row.extend(&report.mean[k]);
        row.extend(&report.q90[k]);
        row.extend(&report.satisfaction[k]);
        stats.push(row);
    }
    stats.write_csv(&dir.join("stats.csv"))?;

    let mut runs = Table::new(
        ["run", "infeasible_at", "shift_checks", "shift_failures", "terminal_norm", "final_c0"]
            .map(String::from)
            .to_vec(),
    );
    for (r, rec) in records.iter().enumerate() {
        runs.push(vec![
            r as f64,
            rec.infeasible_at.map_or(-1.0, |k| k as f64),
            rec.shift_checks as f64,
            rec.shift_failures as f64,
            rec.trajectory.states.last().map_or(f64::NAN, |x| x.norm()),
            rec.final_c0,
        ]);
    }
    runs.write_csv(&dir.join("runs.csv"))?;

    let json = serde_json::to_string_pretty(report).map_err(crate::io::IoError::from)?;
    let path = dir.join("report.json");
    std::fs::write(&path, json).map_err(|e| io_err(&path, e))?;

    let ks: Vec<f64> = (0..=report.steps).map(|k| k as f64).collect();
    for i in 0..nx {
        let mut chart = Chart::new(format!("x{} over time", i + 1), "k", format!("x{}", i + 1));
        chart.series.push(Series::new(format!("mean_x{}", i + 1), report.mean.iter().map(|m| m[i]).collect(), "#2a9d3c"));
        chart.series.push(Series::new(format!("q90_x{}", i + 1), report.q90.iter().map(|m| m[i]).collect(), "#1f5fbf"));
        for j in 0..rows {
            if let Some(level) = axis_bound(chance, j, i) {
                chart.hlines.push((format!("constraint c{}", j + 1), level));
            }
        }
        svg::write(&dir.join(format!("x{}.svg", i + 1)), &chart, &ks)?;
    }
    let mut chart = Chart::new("chance constraint satisfaction", "k", "rate");
    for j in 0..rows {
        chart.series.push(Series::new(format!("sat_c{}", j + 1), report.satisfaction.iter().map(|s| s[j]).collect(), "#b03a2e"));
    }
    chart.hlines.push(("target".into(), report.chance_level));
    svg::write(&dir.join("satisfaction.svg"), &chart, &ks)?;
    Ok(())
}

/// `x_i ≤ level` when row `j` of the constraint acts on coordinate `i` only.
fn axis_bound(p: &HPolytope, j: usize, i: usize) -> Option<f64> {
    let row = p.h.row(j);
    let nz: Vec<usize> = (0..row.len()).filter(|&c| row[c] != 0.0).collect();
    (nz == [i]).then(|| p.b[j] / row[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceThresholds {
    pub min_satisfaction: f64,
    pub max_terminal_norm_mean: f64,
    pub max_solve_time_mean: f64,
}

impl Default for AcceptanceThresholds {
    fn default() -> Self {
        Self { min_satisfaction: 0.88, max_terminal_norm_mean: 0.05, max_solve_time_mean: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Closed-loop acceptance checks on a report.
pub fn check_report(r: &MonteCarloReport, t: &AcceptanceThresholds) -> Vec<CheckLine> {
    let min_sat = r.min_satisfaction.iter().copied().fold(f64::INFINITY, f64::min);
    let line = |name: &str, pass: bool, detail: String| CheckLine { name: name.into(), pass, detail };
    vec![
        line(
            "chance constraint",
            min_sat >= t.min_satisfaction,
            format!("min per-step rate {min_sat:.4} (target {}, assert ≥ {})", r.chance_level, t.min_satisfaction),
        ),
        line(
            "recursive feasibility",
            r.infeasible_runs == 0 && r.shift_failures == 0,
            format!(
                "{} infeasible runs, {} of {} shifted candidates infeasible",
                r.infeasible_runs, r.shift_failures, r.shift_checks
            ),
        ),
        line(
            "convergence",
            r.mean_terminal_norm < t.max_terminal_norm_mean && r.terminal_in_limit == r.runs,
            format!(
                "‖mean x_T‖ {:.4} (per-run mean {:.4}); {} of {} terminal states in the limit box",
                r.mean_terminal_norm, r.terminal_norm_mean, r.terminal_in_limit, r.runs
            ),
        ),
        line(
            "latency",
            r.solve_time_mean < t.max_solve_time_mean,
            format!("{:.3} ms ± {:.3} ms per step", r.solve_time_mean * 1e3, r.solve_time_std * 1e3),
        ),
    ]
}
