use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dynsl_cli::{CliError, Outcome, RunConfig};

#[derive(Parser)]
#[command(
    name = "dynsl",
    version,
    about = "Super Learner ensembles for dynamic survival prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` and `simulation.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "DYNSL_THREADS")]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "DYNSL_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Run the simulation study.
    Simulate,
    /// Cross-validate the library and fit ensemble weights.
    Fit,
    /// Predict survival for new subjects with a fitted ensemble.
    Predict,
    /// Score a fitted ensemble on held-out data.
    Evaluate,
    /// Print the weight and metric tables of a fitted ensemble.
    Report,
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.simulation.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out = out;
    }
    if let Some(n) = cli.threads.or(config.threads) {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot start {n} threads: {e}")))?;
    }
    let out = config.out.clone();
    match cli.command {
        Command::Simulate => dynsl_cli::simulate(&config, &out),
        Command::Fit => dynsl_cli::fit(&config, &out),
        Command::Predict => dynsl_cli::predict(&config, &out),
        Command::Evaluate => dynsl_cli::evaluate(&config, &out),
        Command::Report => dynsl_cli::report(&config, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(o) => {
            print!("{}", o.summary);
            for f in &o.files {
                eprintln!("wrote {}", f.display());
            }
            for w in &o.warnings {
                eprintln!("warning: {w}");
            }
            if o.warnings.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
