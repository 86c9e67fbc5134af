//! `qkdnet`: load a network, serve it, script it, and measure it.

mod client;
mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(m: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: m.into() }
    }
    pub fn config(m: impl ToString) -> Self {
        Self { code: EXIT_CONFIG, message: m.to_string() }
    }
    pub fn runtime(m: impl ToString) -> Self {
        Self { code: EXIT_RUNTIME, message: m.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "qkdnet", version, about = "Emulated QKD network with key management, relay and SDN control")]
struct Cli {
    /// error, warn, info, debug or trace. RUST_LOG takes precedence.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Simulated,
    LiveClock,
}

#[derive(Subcommand)]
enum Command {
    /// Check a network file and report its invariants and channel counts.
    Validate {
        config: std::path::PathBuf,
    },
    /// Serve the network: northbound API, REST key delivery, entropy and
    /// the session socket.
    Run(commands::RunArgs),
    /// Run a use-case experiment spec and export its metrics.
    Experiment(commands::ExperimentArgs),
    /// Compute a route between two nodes.
    Route(commands::RouteArgs),
    /// Apply cross-connects to one optical switch.
    Switch(commands::SwitchArgs),
    /// Show channels, key buffers, agents and job counters.
    Status(commands::StatusArgs),
}

fn init_logging(level: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(&cli.log_level);
    let r = match cli.command {
        Command::Validate { config } => commands::validate(&config),
        Command::Run(a) => commands::run(a),
        Command::Experiment(a) => commands::experiment(a),
        Command::Route(a) => commands::route(a),
        Command::Switch(a) => commands::switch(a),
        Command::Status(a) => commands::status(a),
    };
    match r {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
