use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use chalkline::pipeline::{InstrumentSelection, Pipeline, PipelineConfig, Stage, OUT_ENV};
use clap::{Parser, Subcommand};

/// Train multitask item heads on sentence embeddings and evaluate the
/// scores against raters, score stability and value-added measures.
#[derive(Parser, Debug)]
#[command(name = "chalkline", version)]
struct Cli {
    /// Pipeline config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Instruments whose chapters and items are used.
    #[arg(long, global = true, value_parser = ["mqi", "class", "both"])]
    instrument: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate the synthetic corpus, ratings, VAM table and embeddings.
    Simulate,
    /// Segment transcripts and build labeled windows.
    Ingest,
    /// Write signal-free synthetic embeddings for every corpus sentence.
    EmbedSynth,
    /// Train the encoder and write one checkpoint per epoch.
    Train,
    /// Score all windows under every checkpoint.
    Score,
    /// Partial Spearman against the rater panel.
    EvalSpearman,
    /// Nested variance decomposition of prefix-window scores.
    EvalGtheory,
    /// Kendall-tau kernel CCA against value-added measures.
    EvalTaucca,
    /// Render SVG charts from the analysis CSVs.
    Report,
    /// Run every stage in order.
    All,
    /// Print the effective config as TOML.
    PrintConfig,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Simulate => Stage::Simulate,
            Command::Ingest => Stage::Ingest,
            Command::EmbedSynth => Stage::EmbedSynth,
            Command::Train => Stage::Train,
            Command::Score => Stage::Score,
            Command::EvalSpearman => Stage::EvalSpearman,
            Command::EvalGtheory => Stage::EvalGtheory,
            Command::EvalTaucca => Stage::EvalTaucca,
            Command::Report => Stage::Report,
            Command::All => Stage::All,
            Command::PrintConfig => return None,
        })
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(i) = &cli.instrument {
        cfg.instrument = i.parse::<InstrumentSelection>()?;
    }
    if let Some(out) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        cfg.paths.out = PathBuf::from(out);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.jobs {
        anyhow::ensure!(n > 0, "--jobs must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = load_config(cli)?;
    let Some(stage) = cli.command.stage() else {
        print!("{}", toml::to_string(&cfg)?);
        return Ok(());
    };
    let pipeline = Pipeline::new(cfg)?;
    pipeline.run(stage)?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<chalkline::Error>() {
        Some(chalkline::Error::MissingArtifact(_)) => 3,
        Some(chalkline::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
