use anyhow::Result;
use clap::{Parser, Subcommand};

use ctrlr_cli::commands::{
    run_analyze, run_build_dfa, run_distill, run_oracle_check, run_sample, run_train, AnalyzeArgs,
    BuildDfaArgs, DistillArgs, OracleArgs, SampleArgs, TrainArgs,
};

/// Guided-rollout reinforcement learning at desk scale: lexically
/// constrained exploration with exact importance-weight accounting.
#[derive(Parser)]
#[command(name = "ctrlr", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a guidance HMM on a token corpus via Baum-Welch
    #[command(name = "distill-hmm")]
    DistillHmm(DistillArgs),
    /// Compile keyphrase constraints into dense automata
    #[command(name = "build-dfa")]
    BuildDfa(BuildDfaArgs),
    /// Sample (guided) trajectories into a JSONL dump
    Sample(SampleArgs),
    /// Run a training loop and write metrics, checkpoints, and a manifest
    Train(TrainArgs),
    /// Build reports (keyword usage, weight histograms) from a dump or run
    Analyze(AnalyzeArgs),
    /// Cross-check the fast paths against brute-force enumeration
    #[command(name = "oracle-check")]
    OracleCheck(OracleArgs),
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::DistillHmm(args) => run_distill(&args)?,
        Command::BuildDfa(args) => run_build_dfa(&args)?,
        Command::Sample(args) => run_sample(&args)?,
        Command::Train(args) => {
            run_train(&args)?;
        }
        Command::Analyze(args) => {
            run_analyze(&args)?;
        }
        Command::OracleCheck(args) => {
            if !run_oracle_check(&args)? {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}
