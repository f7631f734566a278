//! Command-line entry point: data generation, pretraining, evaluation,
//! next-basket inference and cost benchmarks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{RunConfig, SEED_ENV};

#[derive(Parser)]
#[command(name = "nest", version, about = "Hierarchical set-sequence transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest a dataset and write it as JSON lines.
    GenData(RunArgs),
    /// Pretrain with the joint masked-token and masked-set objectives.
    Pretrain(RunArgs),
    /// Rank the tokens of held-out masked sets.
    EvalSet(RunArgs),
    /// Next-basket recommendation over a held-out split.
    Nbr(RunArgs),
    /// Analytic cost model and optional throughput measurement.
    Bench(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Sectioned key = value configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set model.d_model=64 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory for every artifact.
    #[arg(short, long)]
    out: PathBuf,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (name, args) = match &cli.command {
        Command::GenData(a) => ("gen-data", a),
        Command::Pretrain(a) => ("pretrain", a),
        Command::EvalSet(a) => ("eval-set", a),
        Command::Nbr(a) => ("nbr", a),
        Command::Bench(a) => ("bench", a),
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut cfg = RunConfig::resolve(args.config.as_deref(), &args.overrides, env_seed.as_deref())?;
    std::fs::create_dir_all(&args.out)?;
    let out = args.out.as_path();
    let result = match cli.command {
        Command::GenData(_) => commands::gen_data(&cfg, out),
        Command::Pretrain(_) => commands::pretrain(&mut cfg, out),
        Command::EvalSet(_) => commands::eval_set(&cfg, out),
        Command::Nbr(_) => commands::nbr(&cfg, out),
        Command::Bench(_) => commands::bench(&mut cfg, out),
    };
    result.map_err(|e| e.context(format!("{name} failed")))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
