//! `anonlab`: corpus generation, adversarial recognizer training, speaker
//! probes, toy resynthesis, mutual-information analysis and reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::PipelineConfig;

#[derive(Parser)]
#[command(
    name = "anonlab",
    version,
    about = "Speaker anonymization by gradient reversal, at desk scale"
)]
struct Cli {
    /// TOML configuration; every key is optional.
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Configuration overrides, applied after the file.
    #[arg(value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into `corpus/`.
    GenData(Overrides),
    /// Train the recognizer without a speaker branch.
    TrainBaseline(Overrides),
    /// Train the recognizer against a reversed speaker classifier.
    TrainAdv(Overrides),
    /// Train fresh speaker probes on frozen embeddings.
    Probe(Overrides),
    /// Train the toy generator on frozen embeddings.
    TrainSynth(Overrides),
    /// Compare waveform mutual information of two resynthesis pipelines.
    EvalMi(Overrides),
    /// Tabulate every recognizer checkpoint.
    Report(Overrides),
    /// Run the finite-difference and oracle suites.
    GradCheck,
    /// Train, probe and report a grid of reversal settings.
    Sweep(Overrides),
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let load = |o: &Overrides| PipelineConfig::load(cli.config.as_deref(), &o.set);
    match &cli.command {
        Command::GenData(o) => commands::gen_data(&load(o)?)?,
        Command::TrainBaseline(o) => commands::train(&load(o)?, false)?,
        Command::TrainAdv(o) => commands::train(&load(o)?, true)?,
        Command::Probe(o) => commands::probe(&load(o)?)?,
        Command::TrainSynth(o) => commands::train_synth_cmd(&load(o)?)?,
        Command::EvalMi(o) => commands::eval_mi(&load(o)?)?,
        Command::Report(o) => commands::report(&load(o)?)?,
        Command::GradCheck => return commands::grad_check(),
        Command::Sweep(o) => commands::sweep(&load(o)?)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
