use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmcc::harness::{self, load_config, HarnessError, ProblemId, RunConfig, THREADS_ENV};

#[derive(Parser)]
#[command(name = "mmcc", version = harness::VERSION, about = "Monotonic Monte Carlo Control")]
struct Cli {
    /// Worker threads for simulation and gradients.
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    problem: Option<ProblemId>,
    /// Override a setting, e.g. `T=5`, `N=4096`, `growth.beta=0.9`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write artifacts into the run directory.
    Run(ConfigArgs),
    /// Compute the problem's reference solution only.
    Oracle(ConfigArgs),
    /// Print configuration diagnostics; exits 2 if there are any.
    Validate(ConfigArgs),
    /// Continue a run from its last checkpoint.
    Resume {
        dir: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
}

fn load(args: &ConfigArgs) -> Result<RunConfig, HarnessError> {
    let text = match &args.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|source| HarnessError::Io {
            path: p.clone(),
            source,
        })?),
        None => None,
    };
    let mut sets = args.sets.clone();
    if let Some(s) = args.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(o) = &args.output {
        sets.push(format!("output={}", toml::Value::String(o.display().to_string())));
    }
    load_config(text.as_deref(), args.problem, &sets).map_err(|e| match (e, &args.config) {
        (HarnessError::Config(m), Some(p)) => HarnessError::Config(format!("{}: {m}", p.display())),
        (e, _) => e,
    })
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    harness::set_threads(cli.threads)?;
    match cli.command {
        Command::Run(args) => {
            let config = load(&args)?;
            let summary = harness::run(&config)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            eprintln!("artifacts in {}", config.output.display());
        }
        Command::Oracle(args) => {
            let out = harness::oracle(&load(&args)?)?;
            println!("{}", serde_json::to_string_pretty(&out["result"]).expect("json"));
        }
        Command::Validate(args) => {
            let diag = harness::validate(&load(&args)?);
            if !diag.is_empty() {
                for d in &diag {
                    println!("{d}");
                }
                return Err(HarnessError::Config(format!("{} problem(s) found", diag.len())));
            }
            println!("ok");
        }
        Command::Resume { dir, sets } => {
            let summary = harness::resume(&dir, &sets)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mmcc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
