mod commands;
mod config;
mod io;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use miv_att::MivError;

#[derive(Debug, Parser)]
#[command(name = "miv-att", version, about = "ATT estimation with a multiplicative instrumental variable")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "MIV_ATT_WORKERS")]
    workers: Option<usize>,
    /// Progress messages on standard error.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the ATT from a CSV dataset and write a JSON report.
    Estimate {
        /// CSV with columns y, a, z and covariates.
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the Monte-Carlo scenarios of the configuration; writes a summary CSV.
    Simulate,
    /// Draw a synthetic dataset as CSV.
    Generate {
        /// Sample size, overriding the configuration.
        #[arg(long)]
        n: Option<usize>,
    },
}

/// Failure with its exit code: 2 for input or validation problems, 3 when
/// estimation itself fails.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        Self { code: 2, message: msg.into() }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self { code: 3, message: msg.into() }
    }

    pub fn from_core(e: MivError) -> Self {
        match e {
            MivError::InvalidData(_) | MivError::Config(_) => Self::input(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }

    pub fn code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let workers = cli.workers.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| CliError::runtime(format!("cannot start worker pool: {e}")))?;
    let cfg = config::ConfigFile::load(cli.config.as_deref())?;
    let ctx = commands::Context {
        seed: cli.seed,
        out: cli.out,
        verbose: cli.verbose,
    };
    match cli.command {
        Command::Estimate { data } => commands::estimate(&cfg, &data, &ctx),
        Command::Simulate => commands::simulate(&cfg, &ctx),
        Command::Generate { n } => commands::generate(&cfg, n, &ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
