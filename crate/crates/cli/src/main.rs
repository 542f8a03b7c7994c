mod bench;
mod check;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use secagg_compress::Error;

/// Exit codes are a stable contract: 0 success, 1 invariant failure, 2 config error.
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "secagg", version, about = "Secure-aggregation uplink compression simulator")]
struct Cli {
    /// Worker threads for the simulator (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Run an experiment and write results.csv, codebooks.csv and trace.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the root seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Time every codec on a synthetic tensor and report bits per weight.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write bench.csv into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the protocol invariant suite with fixed seeds.
    Check {
        #[arg(long, default_value_t = check::DEFAULT_SEED)]
        seed: u64,
        /// Flip one bit of one masked payload before aggregation.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Print the tables written by `run` as aligned text.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

/// Error carrying the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn failed(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidParameter(_) | Error::Capacity(_) => Failure::config(e.to_string()),
            other => Failure::failed(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let result = match cli.verb {
        Verb::Run { config, out, seed } => run::cmd_run(&config, &out, seed),
        Verb::Bench { config, out, seed } => bench::cmd_bench(config.as_deref(), out.as_deref(), seed),
        Verb::Check { seed, inject_fault } => check::cmd_check(seed, inject_fault),
        Verb::Report { out } => report::cmd_report(&out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
