use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kmpc::harness::commands::{cmd_montecarlo, cmd_pipeline, cmd_report, cmd_robust_baseline, cmd_sensitivity};
use kmpc::harness::{ExperimentConfig, HarnessError, SensitivityConfig};

/// Koopman-lifted distributionally robust tube MPC experiments.
#[derive(Parser)]
#[command(name = "kmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML, or JSON by extension).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the parallel stages.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Clone)]
struct McArgs {
    #[command(flatten)]
    common: Common,
    /// Override the number of Monte-Carlo runs.
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Data, fit, uncertainty sets, backoffs, tubes; writes bundle.json.
    Pipeline(Common),
    /// Closed-loop Monte Carlo from the bundle (built if missing or stale).
    Montecarlo(McArgs),
    /// Backoff sweep over sample sizes and radii.
    Sensitivity(Common),
    /// Monte Carlo with worst-case backoffs, compared to the DRO controller.
    RobustBaseline(McArgs),
    /// Summarize a Monte-Carlo report; with --check, exit 4 on failure.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        check: bool,
    },
}

fn threads(n: Option<usize>) {
    if let Some(n) = n {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
}

fn experiment(c: &Common, runs: Option<usize>) -> Result<(ExperimentConfig, PathBuf), HarnessError> {
    threads(c.threads);
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(r) = runs {
        cfg.montecarlo.runs = r;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    Ok((cfg, out))
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Pipeline(c) => {
            let (cfg, out) = experiment(&c, None)?;
            let b = cmd_pipeline(&cfg, &out)?;
            println!("samples {}  radius {:.3e}  spectral radius {:.4}", b.training.samples, b.radius, b.synthesis.spectral_radius);
            for (j, r) in b.backoffs.iter().enumerate() {
                println!("eta[{j}] = {:.6}{}", r.eta, if r.clamped { " (clamped)" } else { "" });
            }
            println!("terminal set: {} rows, {} iterations", b.tubes.terminal.nrows(), b.tubes.terminal_iterations);
            println!("bundle: {}", out.join("bundle.json").display());
        }
        Command::Montecarlo(a) => {
            let (cfg, out) = experiment(&a.common, a.runs)?;
            let r = cmd_montecarlo(&cfg, &out)?;
            summarize(&r);
        }
        Command::RobustBaseline(a) => {
            let (cfg, out) = experiment(&a.common, a.runs)?;
            print_json(&cmd_robust_baseline(&cfg, &out)?);
        }
        Command::Sensitivity(c) => {
            threads(c.threads);
            let mut cfg = SensitivityConfig::load(&c.config)?;
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            let out = c.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
            let t = cmd_sensitivity(&cfg, &out)?;
            print!("{:>8}", "samples");
            for r in &t.radii {
                print!(" {r:>9.0e}");
            }
            println!();
            for (n, row) in t.sample_sizes.iter().zip(&t.eta) {
                print!("{n:>8}");
                for v in row {
                    print!(" {v:>9.5}");
                }
                println!();
            }
        }
        Command::Report { out, check } => {
            let (r, lines) = cmd_report(Path::new(&out))?;
            summarize(&r);
            let mut ok = true;
            for l in &lines {
                println!("{} {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
                ok &= l.pass;
            }
            if check && !ok {
                return Ok(ExitCode::from(4));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn summarize(r: &kmpc::harness::MonteCarloReport) {
    println!("runs {}  steps {}  infeasible {}", r.runs, r.steps, r.infeasible_runs);
    println!("min satisfaction per constraint: {:?}", r.min_satisfaction);
    println!("peak mean {:?}  peak q90 {:?}", r.peak_mean, r.peak_q90);
    println!("‖mean x_T‖ {:.4}  mean ‖x_T‖ {:.4}  in limit box {}/{}  shift failures {}/{}", r.mean_terminal_norm, r.terminal_norm_mean, r.terminal_in_limit, r.completed_runs, r.shift_failures, r.shift_checks);
    println!("step time {:.3} ms ± {:.3} ms", r.solve_time_mean * 1e3, r.solve_time_std * 1e3);
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
