mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{parse_config, Overrides};

/// Few-shot tabular classification: training, evaluation and exports.
#[derive(Parser)]
#[command(name = "flat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per fold and seed, writing checkpoints and logs.
    Train(#[command(flatten)] Overrides),
    /// Evaluate trained models and the baselines on held-out folds.
    Eval(#[command(flatten)] Overrides),
    /// Evaluate with test-time adaptation of the embeddings.
    AdaptEval(#[command(flatten)] Overrides),
    /// Write dataset embeddings of held-out tasks to CSV.
    ExportEmbeddings(#[command(flatten)] Overrides),
    /// Write first-layer attention maps of held-out tasks to CSV.
    ExportAttention(#[command(flatten)] Overrides),
    /// Time inference over a sweep of column counts.
    Time(#[command(flatten)] Overrides),
    /// Generate a synthetic rule-based corpus as CSV files.
    Synth(#[command(flatten)] Overrides),
}

fn run(command: Command) -> anyhow::Result<()> {
    let (overrides, action): (Overrides, fn(&config::RunConfig) -> anyhow::Result<()>) = match command {
        Command::Train(o) => (o, commands::train),
        Command::Eval(o) => (o, commands::eval),
        Command::AdaptEval(o) => (o, commands::adapt_eval),
        Command::ExportEmbeddings(o) => (o, commands::export_embeddings_cmd),
        Command::ExportAttention(o) => (o, commands::export_attention_cmd),
        Command::Time(o) => (o, commands::time),
        Command::Synth(o) => (o, commands::synth),
    };
    let config = parse_config(&overrides)?;
    action(&config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
