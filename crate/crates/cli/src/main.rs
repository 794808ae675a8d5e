use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nesslab::experiment::{parse_config, run_experiment, ExperimentConfig, Status};
use nesslab::pool::resolve_jobs;
use nesslab::Error;

/// Nonequilibrium steady states of oscillator lattices.
#[derive(Parser)]
#[command(name = "nesslab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the stationary state and its observables.
    Run(Common),
    /// Conductivity against length, with the fitted exponent.
    Sweep(Common),
    /// Exact Gaussian stationary state of a harmonic lattice.
    Oracle(Common),
    /// Green-Kubo integral of the equilibrium flux autocorrelation.
    Gk(Common),
    /// Rate function of segment-averaged entropy production.
    Ldf(Common),
    /// Kipnis-Marchioro-Presutti exchange chain.
    Kmp(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the study's replica count.
    #[arg(long)]
    replicas: Option<usize>,
    /// Worker threads.
    #[arg(long, env = "NESSLAB_JOBS")]
    jobs: Option<usize>,
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Run(c) => ("run", c),
            Command::Sweep(c) => ("sweep", c),
            Command::Oracle(c) => ("oracle", c),
            Command::Gk(c) => ("gk", c),
            Command::Ldf(c) => ("ldf", c),
            Command::Kmp(c) => ("kmp", c),
        }
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else if matches!(e, Error::Io(_)) {
        1
    } else {
        EXIT_CONFIG
    }
}

fn load(kind: &str, args: &Common) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::Config {
        path: args.config.display().to_string(),
        message: e.to_string(),
    })?;
    let mut config = parse_config(&text)?;
    if config.study.name() != kind {
        return Err(Error::Config {
            path: "study.kind".into(),
            message: format!(
                "config describes a `{}` study, not `{kind}`",
                config.study.name()
            ),
        });
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.output = out.clone();
    }
    if let Some(n) = args.replicas {
        config.study.set_replicas(n);
    }
    config.resolve()?;
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = cli.command.parts();
    let config = match load(kind, args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let jobs = resolve_jobs(args.jobs);
    match run_experiment(&config, jobs) {
        Ok(outcome) => {
            let record = &outcome.record;
            println!(
                "{} study: {:?}; results in {}",
                record.study,
                record.status,
                outcome.dir.join("summary.json").display()
            );
            for t in record.tasks.iter().filter(|t| t.status != Status::Ok) {
                eprintln!(
                    "{} failed: {}",
                    t.task,
                    t.error.as_deref().unwrap_or("unknown")
                );
            }
            if outcome.has_failures() {
                ExitCode::from(EXIT_NUMERICAL)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
