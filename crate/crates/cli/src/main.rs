//! `adtg`: corpus synthesis, graph building, staged training, evaluation and
//! planning from one JSON config.

mod commands;
mod overrides;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use adtg::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "adtg", version, about = "Task graphs, tracking, recommendation and planning for procedural videos")]
#[command(after_help = "Any config field can be overridden with --key=value, e.g. --guidance.beam_width=3 or --seeds=[0,1,2].")]
struct Cli {
    /// JSON run config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single root seed (replaces the config's seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Corpus directory.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Chain,
    Separable,
    Ambiguous,
    Suite,
    Crosstask18,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Embeddings,
    Tracker,
    Recommender,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus with its ground-truth graphs.
    Synth {
        /// Built-in task set, used when the config lists no synth specs.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Video count multiplier for the crosstask18 preset.
        #[arg(long, default_value_t = 1.0)]
        video_scale: f64,
    },
    /// Validate a corpus and compare its statistics with the reference table.
    IngestVerify {
        /// Allowed relative deviation on video counts and action spaces.
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
        /// Treat statistic mismatches as validation errors.
        #[arg(long)]
        strict: bool,
    },
    /// Build one graph per task from the training split (JSON and DOT).
    BuildGraphs,
    /// Train stages for every seed; completed stages are skipped.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Retrain even when the stage is up to date.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate trained models.
    Eval {
        /// tracking, recommendation, plan_complete, plan_prefix or all.
        #[arg(long, default_value = "all")]
        mode: Vec<String>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Plan for one video from a cut point and print it beside the ground truth.
    Plan {
        /// Video id, looked up in every split.
        #[arg(long)]
        video: String,
        /// Seconds observed before planning.
        #[arg(long, default_value_t = 0)]
        cut: usize,
    },
    /// Per-task corpus statistics.
    Stats {
        /// Print the rows as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

fn load_config(cli: &Cli, overrides: &[String]) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(overrides.iter().map(String::as_str))?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(p) = &cli.out {
        cfg.out = p.clone();
    }
    if let Some(p) = &cli.corpus {
        cfg.corpus = p.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli, overrides: Vec<String>) -> Result<()> {
    let cfg = load_config(&cli, &overrides)?;
    match cli.cmd {
        Cmd::Synth { preset, video_scale } => commands::synth(&cfg, preset, video_scale),
        Cmd::IngestVerify { tolerance, strict } => commands::ingest_verify(&cfg, tolerance, strict),
        Cmd::BuildGraphs => commands::build_graphs(&cfg),
        Cmd::Train { stage, force } => stages::train(&cfg, stage, force),
        Cmd::Eval { mode, split } => commands::eval(&cfg, &mode, split),
        Cmd::Plan { video, cut } => commands::plan(&cfg, &video, cut),
        Cmd::Stats { json } => commands::stats(&cfg, json),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let (args, overrides) = overrides::split(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
