mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sabra_core::exec::{self, Execution};

use commands::{CliError, Run};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "sabra", version, about = "Feedback and robust stabilization of the sabra shell model")]
struct Cli {
    /// Run configuration; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Open-loop trajectory.
    Simulate,
    /// Steady state for the configured forcing.
    Steady,
    /// Eigenvalues of the linearization and the split at beta.
    Spectrum,
    /// Finite-rank feedback law, basin probe and a closed-loop run.
    Lqr,
    /// Game-Riccati controller, attenuation and the saddle loop.
    Hinf,
    /// Critical attenuation levels.
    Gamma,
    /// Full acceptance suite.
    Verify,
    /// Print the effective configuration.
    Config,
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Config(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.clone();
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let cfg = load(cli)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.emit());
        return Ok(vec![]);
    }
    let mut run = Run::new(cfg)?;
    let ex = Execution::Parallel;
    let res = match cli.command {
        Command::Simulate => commands::simulate(&mut run),
        Command::Steady => commands::steady(&mut run),
        Command::Spectrum => commands::spectrum(&mut run),
        Command::Lqr => commands::lqr(&mut run, ex),
        Command::Hinf => commands::hinf(&mut run),
        Command::Gamma => commands::gamma(&mut run),
        Command::Verify => commands::verify(&mut run, ex),
        Command::Config => unreachable!(),
    };
    for p in &run.sink.written {
        eprintln!("wrote {}", p.display());
    }
    res.map(|_| run.sink.written)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match exec::with_jobs(cli.jobs, || dispatch(&cli)) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sabra: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
