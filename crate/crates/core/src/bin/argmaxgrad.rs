//! Command-line front end: `run`, `fetch` and `profile`.
//!
//! Failures print a JSON object `{error, message, exit_code}` on stderr and
//! exit with 2 (spec), 3 (data) or 4 (numeric).

use std::path::PathBuf;
use std::process::ExitCode;

use argmaxgrad::experiment::{self, DatasetName, ExperimentKind, ExperimentSpec};
use argmaxgrad::Result;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "argmaxgrad", version, about = "Discrete VAE gradient-estimator experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment spec.
    Run {
        spec: PathBuf,
        /// Override a spec field by dotted path, e.g. `train.epochs=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Download and verify a dataset.
    Fetch { dataset: String, dir: PathBuf },
    /// Run the bias-variance protocol of a spec regardless of its kind.
    Profile {
        spec: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, short)]
        quiet: bool,
    },
}

fn load(path: &PathBuf, set: &[String]) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| argmaxgrad::Error::Config(format!("{}: {e}", path.display())))?;
    let env = std::env::var(experiment::SEED_ENV).ok();
    ExperimentSpec::from_json_with_overrides(&text, set, env.as_deref())
}

fn execute(spec: &ExperimentSpec, quiet: bool) -> Result<()> {
    let summary = experiment::run_with_progress(spec, &mut |line| {
        if !quiet {
            eprintln!("{line}");
        }
    })?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { spec, set, quiet } => execute(&load(&spec, &set)?, quiet),
        Command::Profile { spec, set, quiet } => {
            let mut spec = load(&spec, &set)?;
            spec.kind = ExperimentKind::BiasVariance;
            execute(&spec, quiet)
        }
        Command::Fetch { dataset, dir } => {
            let name: DatasetName = dataset.parse()?;
            for path in experiment::fetch(name, &dir)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", experiment::error_json(&e));
            ExitCode::from(experiment::exit_code(&e) as u8)
        }
    }
}
