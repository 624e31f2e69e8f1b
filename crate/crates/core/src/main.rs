use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use levy_bsde::runner::{self, ConfigError, ExperimentConfig};
use levy_bsde::Error;

/// Lévy-driven BSDE experiment runner.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config or a built-in scenario name.
    Run {
        config: String,
        /// Output directory (default: the config's `output`, else runs/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        verbose: bool,
    },
    /// List the built-in scenarios.
    ListScenarios {
        /// Only scenarios of this kind.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Parse and validate a config without running it.
    Validate { config: String },
}

const EXIT_CHECKS_FAILED: u8 = 1;
const EXIT_SYNTAX: u8 = 2;
const EXIT_INVALID: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;
const EXIT_IO: u8 = 5;

fn load(arg: &str) -> Result<ExperimentConfig, (u8, String)> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(s) = runner::scenario(arg) {
            return Ok(s.config());
        }
        return Err((EXIT_IO, format!("{arg}: no such file or built-in scenario")));
    }
    let text = std::fs::read_to_string(path).map_err(|e| (EXIT_IO, format!("{arg}: {e}")))?;
    ExperimentConfig::from_json(&text).map_err(|e| {
        let code = match e {
            ConfigError::Syntax { .. } => EXIT_SYNTAX,
            _ => EXIT_INVALID,
        };
        (code, format!("{arg}: {e}"))
    })
}

fn run(arg: &str, out: Option<PathBuf>, threads: Option<usize>, verbose: bool) -> Result<u8, (u8, String)> {
    let config = load(arg)?;
    let dir = out
        .or_else(|| config.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(&config.name));
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err((EXIT_INVALID, "--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| (EXIT_IO, e.to_string()))?;
    let outcome = pool.install(|| runner::run(&config, verbose)).map_err(|e| {
        let code = match e {
            Error::Io(_) => EXIT_IO,
            Error::Config(_) | Error::InvalidModel(_) | Error::InvalidNet(_) => EXIT_INVALID,
            _ => EXIT_NUMERICAL,
        };
        (code, format!("{}: {e}", config.name))
    })?;
    let manifest = runner::write_outputs(&dir, &config, &outcome).map_err(|e| (EXIT_IO, e.to_string()))?;
    print!("{}", outcome.summary(&config));
    println!("outputs: {} ({} files)", dir.display(), manifest.outputs.len() + 1);
    Ok(if outcome.passed() { 0 } else { EXIT_CHECKS_FAILED })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            threads,
            verbose,
        } => run(&config, out, threads, verbose),
        Command::ListScenarios { kind } => {
            for s in runner::scenarios() {
                if kind.as_deref().map_or(true, |k| k == s.kind.label()) {
                    println!("{:<24} {:<16} {}", s.name, s.kind.label(), s.description);
                }
            }
            Ok(0)
        }
        Command::Validate { config } => load(&config).map(|c| {
            println!("ok: {} ({})", c.name, c.kind);
            0
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
