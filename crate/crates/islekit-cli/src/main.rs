//! Command-line front end: run one scenario, sweep the bundled matrix,
//! estimate harmonics from a recorded waveform, or solve a power flow.
//!
//! Exit codes: 0 success (non-islanding where a verdict applies), 2 bad
//! usage, configuration, or I/O, 3 solver non-convergence, 10 islanding
//! detected.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use islekit::config::{bundled_names, bundled_scenario, BuiltScenario, ScenarioConfig};
use islekit::detector::Verdict;
use islekit::ekf::{EstimatorConfig, HarmonicEstimator};
use islekit::grid::{network_from_tables, solve_power_flow, GridError, NetworkModel};
use islekit::pipeline::{run_pipeline, run_sweep, sweep_csv, write_run_artifacts, PipelineError};

const EXIT_USAGE: u8 = 2;
const EXIT_NON_CONVERGENT: u8 = 3;
const EXIT_ISLANDING: u8 = 10;

#[derive(Parser)]
#[command(name = "islekit", version, about = "Islanding detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario through the simulator, estimator, and detector.
    Run(RunArgs),
    /// Run every bundled scenario and print the classification matrix.
    Sweep(SweepArgs),
    /// Estimate harmonic amplitudes from a two-column waveform CSV.
    Estimate(EstimateArgs),
    /// Solve the steady-state power flow and print bus voltages.
    Powerflow(PowerflowArgs),
    /// List the bundled scenarios.
    Scenarios,
}

#[derive(Args)]
struct RunArgs {
    /// Bundled scenario name or path to a scenario TOML file.
    #[arg(long)]
    scenario: String,
    /// Directory for waveform, estimate, and report artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record seed, shorthand for --set record.seed=N.
    #[arg(long)]
    seed: Option<u64>,
    /// Monitored bus, shorthand for --set record.monitor_bus=N.
    #[arg(long)]
    monitor_bus: Option<usize>,
    /// Dotted-path override, e.g. --set detector.settle_delay_cycles=6.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// Directory for sweep.csv plus one artifact directory per scenario.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path override applied to every scenario.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct EstimateArgs {
    /// CSV with a time_s,value header and one sample per row.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Measurement-noise variance R.
    #[arg(long, default_value_t = 1e-4)]
    noise_r: f64,
    /// Process-noise variance for the harmonic envelopes.
    #[arg(long, default_value_t = 1e-6)]
    q_envelope: f64,
    /// Process-noise variance for the 75 Hz pair.
    #[arg(long, default_value_t = 1e-6)]
    q_interharmonic: f64,
}

#[derive(Args)]
struct PowerflowArgs {
    /// Network file; the built-in nine-bus feeder when omitted.
    #[arg(long)]
    network: Option<PathBuf>,
    /// Open the utility breaker before solving.
    #[arg(long)]
    islanded: bool,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Copy, Clone, ValueEnum)]
enum Format {
    Text,
    Csv,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Powerflow(args) => cmd_powerflow(args),
        Command::Scenarios => {
            for name in bundled_names() {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
    }
}

fn fail(message: impl std::fmt::Display, code: u8) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(code)
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, String> {
    args.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| format!("--set expects KEY=VALUE, got {s:?}"))
        })
        .collect()
}

fn build_scenario(spec: &str, overrides: &[(String, String)]) -> Result<BuiltScenario, String> {
    let (text, base_dir): (String, Option<&Path>) = match bundled_scenario(spec) {
        Ok(text) => (text.to_string(), None),
        Err(_) => {
            let path = Path::new(spec);
            if !path.exists() {
                return Err(format!(
                    "{spec:?} is neither a bundled scenario nor a file; \
                     run `islekit scenarios` for the bundled names"
                ));
            }
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("reading {}: {e}", path.display()))?;
            (text, path.parent())
        }
    };
    let cfg = ScenarioConfig::parse_with_overrides(&text, overrides).map_err(|e| e.to_string())?;
    cfg.build(base_dir).map_err(|e| e.to_string())
}

fn verdict_exit(verdict: Verdict) -> ExitCode {
    if verdict == Verdict::Islanding {
        ExitCode::from(EXIT_ISLANDING)
    } else {
        ExitCode::SUCCESS
    }
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let mut overrides = match parse_overrides(&args.sets) {
        Ok(o) => o,
        Err(e) => return fail(e, EXIT_USAGE),
    };
    if let Some(seed) = args.seed {
        overrides.push(("record.seed".into(), seed.to_string()));
    }
    if let Some(bus) = args.monitor_bus {
        overrides.push(("record.monitor_bus".into(), bus.to_string()));
    }
    let built = match build_scenario(&args.scenario, &overrides) {
        Ok(b) => b,
        Err(e) => return fail(e, EXIT_USAGE),
    };
    let mut run = match run_pipeline(&built) {
        Ok(r) => r,
        Err(e) => {
            let code = pipeline_exit(&e);
            return fail(e, code);
        }
    };
    if let Some(dir) = &args.out {
        if let Err(e) = write_run_artifacts(&mut run, dir) {
            return fail(e, EXIT_USAGE);
        }
    }
    print!("{}", run.report);
    verdict_exit(run.report.verdict)
}

fn pipeline_exit(err: &PipelineError) -> u8 {
    match err {
        PipelineError::Grid(GridError::NonConvergent { .. }) => EXIT_NON_CONVERGENT,
        _ => EXIT_USAGE,
    }
}

fn cmd_sweep(args: SweepArgs) -> ExitCode {
    let overrides = match parse_overrides(&args.sets) {
        Ok(o) => o,
        Err(e) => return fail(e, EXIT_USAGE),
    };
    let mut runs = match run_sweep(&overrides) {
        Ok(r) => r,
        Err(e) => {
            let code = pipeline_exit(&e);
            return fail(e, code);
        }
    };
    if let Some(dir) = &args.out {
        if let Err(e) = std::fs::create_dir_all(dir) {
            return fail(format!("creating {}: {e}", dir.display()), EXIT_USAGE);
        }
        for run in &mut runs {
            let sub = dir.join(&run.report.scenario_id);
            if let Err(e) = write_run_artifacts(run, &sub) {
                return fail(e, EXIT_USAGE);
            }
        }
        let path = dir.join("sweep.csv");
        if let Err(e) = std::fs::write(&path, sweep_csv(&runs)) {
            return fail(format!("writing {}: {e}", path.display()), EXIT_USAGE);
        }
    }
    print!("{}", sweep_csv(&runs));
    ExitCode::SUCCESS
}

fn cmd_estimate(args: EstimateArgs) -> ExitCode {
    let text = match std::fs::read_to_string(&args.input) {
        Ok(t) => t,
        Err(e) => return fail(format!("reading {}: {e}", args.input.display()), EXIT_USAGE),
    };
    let samples = match parse_waveform_csv(&text) {
        Ok(s) => s,
        Err(e) => return fail(e, EXIT_USAGE),
    };
    let ts = match uniform_step(&samples) {
        Ok(ts) => ts,
        Err(e) => return fail(e, EXIT_USAGE),
    };
    let cfg = EstimatorConfig {
        ts,
        measurement_noise_r: args.noise_r,
        process_noise_q: EstimatorConfig::q_diagonal(
            args.q_envelope,
            1e-8,
            args.q_interharmonic,
            1e-6,
        ),
        ..EstimatorConfig::default()
    };
    let mut ekf = match HarmonicEstimator::new(cfg) {
        Ok(e) => e,
        Err(e) => return fail(e, EXIT_USAGE),
    };
    let mut out = String::from("time_s,f1_hz,a1,a2,a3,a4,a5,a6,a7,a8,a9,a75,dc\n");
    // The first sample seeds t=0; estimates start one step in.
    for (t, z) in samples.iter().skip(1) {
        let est = match ekf.step(*z) {
            Ok(e) => e,
            Err(e) => return fail(format!("estimator diverged at t={t}: {e}"), EXIT_NON_CONVERGENT),
        };
        out.push_str(&format!("{t},{}", est.f1_est_hz));
        for a in est.amplitudes {
            out.push_str(&format!(",{a}"));
        }
        out.push_str(&format!(",{},{}\n", est.interharmonic_amplitude, est.dc_est));
    }
    match args.out {
        Some(path) => match std::fs::write(&path, out) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(format!("writing {}: {e}", path.display()), EXIT_USAGE),
        },
        None => {
            print!("{out}");
            ExitCode::SUCCESS
        }
    }
}

fn parse_waveform_csv(text: &str) -> Result<Vec<(f64, f64)>, String> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with(|c: char| c.is_alphabetic())) {
            continue;
        }
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| format!("line {}: expected time_s,value", i + 1))?;
        let t: f64 = t.trim().parse().map_err(|e| format!("line {}: {e}", i + 1))?;
        let v: f64 = v.trim().parse().map_err(|e| format!("line {}: {e}", i + 1))?;
        samples.push((t, v));
    }
    if samples.len() < 3 {
        return Err("need at least 3 samples".into());
    }
    Ok(samples)
}

fn uniform_step(samples: &[(f64, f64)]) -> Result<f64, String> {
    let ts = samples[1].0 - samples[0].0;
    if ts <= 0.0 {
        return Err("time column must be strictly increasing".into());
    }
    for w in samples.windows(2) {
        let dt = w[1].0 - w[0].0;
        if (dt - ts).abs() > 1e-6 * ts.max(1e-12) {
            return Err(format!(
                "non-uniform sampling: step {dt:.3e} s near t={} vs {ts:.3e} s",
                w[0].0
            ));
        }
    }
    Ok(ts)
}

fn cmd_powerflow(args: PowerflowArgs) -> ExitCode {
    let mut net = match &args.network {
        Some(path) => match NetworkModel::load(path) {
            Ok(n) => n,
            Err(e) => return fail(format!("{}: {e}", path.display()), EXIT_USAGE),
        },
        None => network_from_tables(),
    };
    if args.islanded {
        net.set_breaker(false);
    }
    let sol = match solve_power_flow(&net) {
        Ok(s) => s,
        Err(e @ GridError::NonConvergent { .. }) => return fail(e, EXIT_NON_CONVERGENT),
        Err(e) => return fail(e, EXIT_USAGE),
    };
    match args.format {
        Format::Csv => {
            println!("bus,v_pu,angle_deg");
            for (id, v) in sol.bus_ids.iter().zip(&sol.v) {
                println!("{id},{},{}", v.norm(), v.arg().to_degrees());
            }
        }
        Format::Text => {
            println!(
                "converged in {} iterations, max mismatch {:.3e} pu",
                sol.iterations, sol.max_mismatch
            );
            println!(
                "slack bus {}: {:.4} + j{:.4} pu injected, series losses {:.5} pu",
                sol.slack_bus,
                sol.slack_injection.re,
                sol.slack_injection.im,
                sol.total_losses.re
            );
            for (id, v) in sol.bus_ids.iter().zip(&sol.v) {
                println!("bus {id:>2}: {:.5} pu  {:>8.3} deg", v.norm(), v.arg().to_degrees());
            }
        }
    }
    ExitCode::SUCCESS
}
