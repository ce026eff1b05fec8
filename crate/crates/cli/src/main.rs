mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glyphnet::ModelKind;

use config::{EvalConfig, EvalFlags, FileConfig, RunConfig, TrainFlags};

/// Train, evaluate and ensemble small CNN classifiers for handwritten glyphs.
#[derive(Parser)]
#[command(name = "glyphnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint and metrics.
    Train(TrainArgs),
    /// Evaluate one checkpoint, or an ensemble, on a corpus's test split.
    Evaluate(EvalArgs),
    /// Render a synthetic glyph corpus.
    GenToy(GenToyArgs),
    /// Print a checkpoint's manifest.
    Inspect { checkpoint: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with defaults for any of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate; defaults to the model's own.
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, overrides_with = "no_augment")]
    augment: bool,
    #[arg(long, overrides_with = "augment")]
    no_augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(conflicts_with = "ensemble")]
    checkpoint: Option<PathBuf>,
    /// Average the softmax outputs of these checkpoints.
    #[arg(long, num_args = 1..)]
    ensemble: Vec<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Split seed; defaults to the first checkpoint's training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenToyArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: glyphnet::Error| e.to_string())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => {
            let file = FileConfig::load_opt(a.config.as_deref())?;
            let augment = match (a.augment, a.no_augment) {
                (true, _) => Some(true),
                (_, true) => Some(false),
                _ => None,
            };
            let flags = TrainFlags {
                model: a.model,
                corpus: a.corpus,
                out: a.out,
                image_size: a.image_size,
                epochs: a.epochs,
                batch_size: a.batch_size,
                lr0: a.lr0,
                seed: a.seed,
                augment,
            };
            commands::train(&RunConfig::resolve(flags, file)?)
        }
        Command::Evaluate(a) => {
            let file = FileConfig::load_opt(a.config.as_deref())?;
            let flags = EvalFlags {
                checkpoints: a.checkpoint.into_iter().chain(a.ensemble).collect(),
                corpus: a.corpus,
                out: a.out,
                image_size: a.image_size,
                seed: a.seed,
            };
            commands::evaluate_checkpoints(&EvalConfig::resolve(flags, file)?)
        }
        Command::GenToy(a) => commands::gen_toy(&a.out, a.classes, a.per_class, a.seed),
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    }
}

/// Large tensors are allocated and freed every step; keeping them on the
/// heap instead of fresh mmaps avoids repeated page faults.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn tune_allocator() {
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 512 << 20);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn tune_allocator() {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    tune_allocator();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
