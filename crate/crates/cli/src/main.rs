//! `qkdtwin alice|bob|simulate`: run one node, or both nodes in one process.
//!
//! Exit codes: 0 ok, 2 invalid configuration, 3 synchronization failed,
//! 4 desynchronization detected, 5 frame or tag mismatch, 6 authentication
//! key reservoir empty, 7 I/O error, 8 peer aborted for an unknown reason,
//! 9 internal error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qkdtwin::node::{exit, load_config, run_session, Budget, Role, SessionConfig};

#[derive(Parser)]
#[command(name = "qkdtwin", version, about = "Decoy-state BB84 link twin")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Transmitter daemon: listens on the configured endpoint.
    Alice(RunArgs),
    /// Receiver daemon: connects to the endpoint and hosts the link simulator.
    Bob(RunArgs),
    /// Both nodes and the channel in one process.
    Simulate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Acquisition time in simulated seconds.
    #[arg(long, value_name = "S", conflicts_with = "pulses")]
    duration: Option<f64>,
    /// Acquisition budget in pulses.
    #[arg(long, value_name = "N")]
    pulses: Option<u64>,
    /// Per-second metrics table (CSV).
    #[arg(long, value_name = "PATH")]
    metrics: Option<PathBuf>,
    /// Directory for key files, manifests, audit and logs.
    #[arg(long, value_name = "PATH")]
    keys: Option<PathBuf>,
    /// Extra `key=value` settings applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn build_config(role: Role, args: &RunArgs) -> Result<SessionConfig, String> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path).map_err(|e| e.to_string())?,
        None => SessionConfig::default(),
    };
    cfg.role = role;
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set expects key=value, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| e.to_string())?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = args.duration {
        cfg.budget = Budget::Seconds(d);
    }
    if let Some(n) = args.pulses {
        cfg.budget = Budget::Pulses(n);
    }
    if args.metrics.is_some() {
        cfg.metrics = args.metrics.clone();
    }
    if args.keys.is_some() {
        cfg.keys = args.keys.clone();
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (role, args) = match &cli.command {
        Command::Alice(a) => (Role::Alice, a),
        Command::Bob(a) => (Role::Bob, a),
        Command::Simulate(a) => (Role::Orchestrator, a),
    };
    let cfg = match build_config(role, args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(exit::CONFIG);
        }
    };
    let report = run_session(&cfg);
    if let Some(audit) = report.audit() {
        print!("{}", audit.to_text());
    }
    if let Some(e) = &report.error {
        eprintln!("error: {e}");
    }
    ExitCode::from(report.exit_code)
}
