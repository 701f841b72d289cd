use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedgtea::gaussian::Distance;
use fedgtea::models::Scale;
use fedgtea::orchestrator::{Method, SequenceId};
use fedgtea_cli::config::{parse_scale, parse_seeds, resolve, Overrides, RunConfigFile};
use fedgtea_cli::{cmd_distances, cmd_report, cmd_run, CliError};

#[derive(Parser)]
#[command(
    name = "fedgtea",
    version,
    about = "Federated class-incremental learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment per seed.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = |s: &str| s.parse::<Method>().map_err(|e| e.to_string()))]
        method: Option<Method>,
        #[arg(long, value_parser = |s: &str| s.parse::<SequenceId>().map_err(|e| e.to_string()))]
        sequence: Option<SequenceId>,
        /// Comma-separated list, e.g. 1,2,3.
        #[arg(long)]
        seeds: Option<String>,
        /// no_cate, no_wasserstein, no_anchor or no_distillation; repeatable.
        #[arg(long)]
        ablate: Vec<String>,
        #[arg(long, value_parser = parse_scale)]
        scale: Option<Scale>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory holding the CIFAR binary batches.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Continue each seed from its latest task checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Mean ± sd of accuracy and forgetting per method and sequence.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Pairwise distances between the task embeddings of a checkpoint.
    Distances {
        checkpoint: PathBuf,
        #[arg(long, default_value = "w2", value_parser = |s: &str| s.parse::<Distance>().map_err(|e| e.to_string()))]
        metric: Distance,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Run {
            config,
            method,
            sequence,
            seeds,
            ablate,
            scale,
            out,
            data_dir,
            resume,
        } => {
            let file = config
                .as_deref()
                .map(RunConfigFile::load)
                .transpose()
                .map_err(CliError::Invalid)?;
            let seeds = seeds
                .as_deref()
                .map(parse_seeds)
                .transpose()
                .map_err(CliError::Invalid)?;
            let ov = Overrides {
                method,
                sequence,
                scale,
                seeds,
                ablate,
                out,
                data_dir,
                resume,
            };
            let plan = resolve(file, &ov).map_err(CliError::Invalid)?;
            cmd_run(&plan, &mut |m| eprintln!("{m}"))
        }
        Cmd::Report { runs } => {
            print!("{}", cmd_report(&runs)?);
            Ok(())
        }
        Cmd::Distances { checkpoint, metric } => {
            print!("{}", cmd_distances(&checkpoint, metric)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
