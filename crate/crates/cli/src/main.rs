mod config;
mod manifest;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigError, RunConfig};
use pipeline::{Outcome, Run};

/// Refine guess translations with word substitutions.
#[derive(Parser)]
#[command(name = "subrefine", version)]
struct Cli {
    /// TOML config file; a run manifest also works and replays that run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for every artifact.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override a config key, e.g. `--set refine.threshold=0.3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the toy corpus and write the four data splits.
    GenData,
    /// Build source and target vocabularies from the training split.
    BuildVocab,
    /// Hellinger PCA embeddings from co-occurrence counts.
    EmbedInit,
    /// Train the word-level error detector and report its metrics.
    TrainDetector,
    /// Train the single-attention substitution model.
    TrainSingle,
    /// Train the dual-attention substitution model.
    TrainDual,
    /// Train the learned position selector for the `cl` heuristic.
    TrainSelector,
    /// Refine the guesses of a split and write traces and a summary.
    Refine,
    /// Corpus BLEU of the refined output against the baseline.
    Evaluate,
    /// Full and partial oracle refinement curves.
    Oracle,
    /// Grid search over heuristic, threshold and budget.
    Sweep,
    /// BLEU and %-modified curves at the best swept setting.
    Curves,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::BuildVocab => "build-vocab",
            Command::EmbedInit => "embed-init",
            Command::TrainDetector => "train-detector",
            Command::TrainSingle => "train-single",
            Command::TrainDual => "train-dual",
            Command::TrainSelector => "train-selector",
            Command::Refine => "refine",
            Command::Evaluate => "evaluate",
            Command::Oracle => "oracle",
            Command::Sweep => "sweep",
            Command::Curves => "curves",
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| config::config_error(format!("cannot create {}: {e}", cli.out.display())))?;
    let ctx = Run { cfg: &cfg, out: &cli.out };
    let Outcome { inputs, artifacts } = match cli.command {
        Command::GenData => pipeline::gen_data(&ctx),
        Command::BuildVocab => pipeline::build_vocab_cmd(&ctx),
        Command::EmbedInit => pipeline::embed_init(&ctx),
        Command::TrainDetector => pipeline::train_detector_cmd(&ctx),
        Command::TrainSingle => pipeline::train_single(&ctx),
        Command::TrainDual => pipeline::train_dual(&ctx),
        Command::TrainSelector => pipeline::train_selector_cmd(&ctx),
        Command::Refine => pipeline::refine(&ctx),
        Command::Evaluate => pipeline::evaluate(&ctx),
        Command::Oracle => pipeline::oracle(&ctx),
        Command::Sweep => pipeline::sweep_cmd(&ctx),
        Command::Curves => pipeline::curves(&ctx),
    }?;
    manifest::write_manifest(&cli.out, cli.command.name(), &cfg, &inputs, &artifacts)?;
    Ok(())
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some()
            || matches!(c.downcast_ref::<subrefine::Error>(), Some(subrefine::Error::Config(_)))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
