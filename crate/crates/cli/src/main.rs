use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use arachne_cli::{cmd_analyze, cmd_experiment, cmd_replay, cmd_run, cmd_serve, resolve_seed, CliError, Exit, RunConfig};
use arachne_core::analysis::ReportParams;
use clap::{Parser, Subcommand};
use serde::Serialize;

/// Adaptive spider exposure: simulate, analyze and steer sessions.
#[derive(Parser)]
#[command(name = "arachne", version)]
struct Cli {
    /// Print machine-readable JSON summaries on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one session from a config file and write its trace directory.
    Run {
        /// JSON run config.
        config: PathBuf,
        /// Session seed; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Trace directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a counterbalanced population and write traces plus a report.
    Experiment {
        /// JSON run config with a `population`.
        config: PathBuf,
        /// Base seed; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of independent replicates; overrides the config.
        #[arg(long)]
        seeds: Option<usize>,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build report.json and report.md from trace directories.
    Analyze {
        /// Trace directories or folders containing them.
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Where to write the report files.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Clustering seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest cluster count tried by the elbow search.
        #[arg(long, default_value_t = 12)]
        k_max: usize,
    },
    /// Recompute rewards and adapter decisions of a stored trace.
    Replay {
        /// Trace directory.
        trace: PathBuf,
    },
    /// Serve the WebSocket/HTTP session API.
    Serve {
        /// Address to bind.
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: SocketAddr,
        /// Where finished session traces are stored.
        #[arg(long, default_value = "traces")]
        traces: PathBuf,
        /// Permit sessions driven by manually entered SUDs ratings.
        #[arg(long)]
        manual: bool,
    },
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("summaries serialize"));
    } else {
        println!("{}", text());
    }
}

fn seed_note(seed: u64, derived: bool) {
    if derived {
        eprintln!("seed: {seed} (derived; pass --seed {seed} to repeat)");
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let json = cli.json;
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(out) = out {
                config.output = out;
            }
            let (seed, derived) = resolve_seed(seed, config.seed);
            seed_note(seed, derived);
            let out = cmd_run(&config, seed)?;
            emit(json, &out, || {
                let mut s = format!(
                    "trace {} ({} steps, outcome {})",
                    out.trace_dir.display(),
                    out.steps,
                    out.outcome.map_or("incomplete".into(), |o| format!("{o:?}"))
                );
                for seg in &out.segments {
                    s.push_str(&format!(
                        "\n  {:<5} phase {} segment {} target {:>2}: mse {:.3} over {} steps",
                        seg.method.to_string(),
                        seg.phase,
                        seg.segment,
                        seg.target,
                        seg.mse,
                        seg.steps
                    ));
                }
                s
            });
        }
        Command::Experiment { config, seed, seeds, out } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(out) = out {
                config.output = out;
            }
            let (seed, derived) = resolve_seed(seed, config.seed);
            seed_note(seed, derived);
            let replicates = seeds.unwrap_or(config.seeds);
            let out = cmd_experiment(&config, seed, replicates)?;
            emit(json, &out, || {
                let mut s = format!(
                    "{} participants x {} replicates -> {}",
                    out.participants,
                    out.replicates,
                    config.output.display()
                );
                for c in out.report.comparisons.iter().filter(|c| c.metric == "mse") {
                    s.push_str(&format!(
                        "\n  {:?} mse: rl {:.3} vs rules {:.3}",
                        c.kind, c.rl_mean, c.rules_mean
                    ));
                }
                for f in &out.failed {
                    s.push_str(&format!("\n  failed: {f}"));
                }
                s
            });
        }
        Command::Analyze {
            traces,
            out,
            seed,
            k_max,
        } => {
            let params = ReportParams {
                seed,
                k_max,
                ..ReportParams::default()
            };
            let report = cmd_analyze(&traces, &out, &params)?;
            emit(json, &report, || report.to_markdown());
        }
        Command::Replay { trace } => {
            let report = cmd_replay(&trace)?;
            emit(json, &report, || {
                format!(
                    "consistent: {} steps, {} rewards, {} actions checked",
                    report.steps_checked, report.rewards_checked, report.actions_checked
                )
            });
        }
        Command::Serve { bind, traces, manual } => cmd_serve(bind, traces, manual)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { Exit::Usage as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit as u8)
        }
    }
}
