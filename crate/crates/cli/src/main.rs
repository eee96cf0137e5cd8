//! `metainv <toy|train|finetune|eval|bayes-check> --config <path> [--seed N] [--out DIR]`
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 1 anything else (I/O).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use metainv::error::Error;
use metainv::harness::{run, ExperimentConfig, ExperimentKind};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Toy,
    Train,
    Finetune,
    Eval,
    BayesCheck,
}

impl From<Command> for ExperimentKind {
    fn from(c: Command) -> Self {
        match c {
            Command::Toy => ExperimentKind::Toy,
            Command::Train => ExperimentKind::Train,
            Command::Finetune => ExperimentKind::Finetune,
            Command::Eval => ExperimentKind::Eval,
            Command::BayesCheck => ExperimentKind::BayesCheck,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "metainv",
    version,
    about = "Meta-learned reconstruction for linear inverse problems"
)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// TOML experiment config, or a previous run's manifest.json to replay it.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's output_dir, then runs/<kind>.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    if matches!(e, Error::Config(_)) {
        2
    } else if e.is_numerical() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let kind = ExperimentKind::from(args.command);

    let result = ExperimentConfig::load(&args.config).and_then(|mut cfg| {
        if cfg.kind != kind {
            return Err(Error::Config(format!(
                "{} is a {} config, not {}",
                args.config.display(),
                cfg.kind.name(),
                kind.name()
            )));
        }
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        let out = args
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs").join(kind.name()));
        log::info!("{} run {} -> {}", kind.name(), cfg.experiment_id(), out.display());
        run(&cfg, &out)
    });

    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary.report).unwrap_or_default());
            log::info!(
                "wrote {} metrics rows to {}",
                summary.metrics_rows,
                summary.output_dir.join("metrics.csv").display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
