use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lmar::pipeline::{Overrides, PipelineConfig, PipelineError, Runner, StageName, STAGES};

#[derive(Parser)]
#[command(name = "lmar", version, about = "Adapt frozen text embeddings to a corpus with LLM supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args)]
struct Opts {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Skip stages whose inputs and outputs match the manifest.
    #[arg(long, global = true)]
    resume: bool,
    /// Global RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replay LLM replies from a JSONL script instead of calling an API.
    #[arg(long, global = true, value_name = "SCRIPT")]
    mock_llm: Option<PathBuf>,
    /// Use the local trigram embedder.
    #[arg(long, global = true)]
    stub_embeddings: bool,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Corpus directory or file, overriding the config.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Segment the corpus into paragraphs.
    Ingest,
    /// Embed every paragraph.
    Embed,
    /// Sample and label triplets.
    Triplets,
    /// Cluster the triplet-refined embeddings.
    Cluster,
    /// Synthesize question-evidence pairs.
    Qepairs,
    /// Train the adapter on triplets, then on question-evidence pairs.
    Train,
    /// Evaluate baseline and adapted retrieval.
    Evaluate,
    /// Every stage in order.
    Pipeline,
    /// Re-emit the report and check the validators.
    Report,
}

impl Command {
    fn stages(self) -> Vec<StageName> {
        match self {
            Command::Ingest => vec![StageName::Ingest],
            Command::Embed => vec![StageName::Embed],
            Command::Triplets => vec![StageName::Triplets],
            Command::Cluster => vec![StageName::Cluster],
            Command::Qepairs => vec![StageName::Qepairs],
            Command::Train => vec![StageName::TrainTriplet, StageName::TrainQe],
            Command::Evaluate => vec![StageName::Evaluate],
            Command::Pipeline => STAGES.to_vec(),
            Command::Report => vec![StageName::Report],
        }
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let mut config = match &cli.opts.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Overrides {
        corpus: cli.opts.corpus.clone(),
        out_dir: cli.opts.out.clone(),
        seed: cli.opts.seed,
        mock_llm: cli.opts.mock_llm.clone(),
        stub_embeddings: cli.opts.stub_embeddings,
    }
    .apply(&mut config);
    let mut runner = Runner::new(config)?;
    let summary = runner.run(&cli.command.stages(), cli.opts.resume)?;
    for s in &summary.stages {
        println!("{}: {}", s.stage, if s.skipped { "skipped" } else { "done" });
    }
    if matches!(cli.command, Command::Pipeline | Command::Report) {
        if let Ok(text) = std::fs::read_to_string(runner.out_dir().join("summary.txt")) {
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.opts.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
