//! `videolstm`: dataset generation, training, evaluation, localization,
//! attention export and architecture comparison.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use videolstm::model::{Stream, Variant};
use videolstm::Error;

/// Exit status for each failure class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Json(_) | Error::Format(_) | Error::Version { .. } => 2,
        Error::Config(_) | Error::Usage(_) | Error::Shape { .. } => 3,
        Error::Divergence { .. } | Error::DegenerateFusion | Error::EmptyTube => 4,
    }
}

#[derive(Parser)]
#[command(name = "videolstm", version, about = "Attention LSTMs for video on synthetic motion data")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic motion dataset.
    GenData(GenDataArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Classification accuracy, optionally with two-stream fusion.
    Eval(EvalArgs),
    /// Attention-based action tubes.
    Localize(LocalizeArgs),
    /// Dump raw attention maps as JSON.
    ExportAttention(ExportArgs),
    /// Train and test a grid of variants and streams.
    Compare(CompareArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Training clips per class.
    #[arg(long)]
    pub clips_per_class: Option<usize>,
    #[arg(long)]
    pub test_clips_per_class: Option<usize>,
    /// Frames per clip.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Frame side length in pixels.
    #[arg(long)]
    pub frame: Option<usize>,
    #[arg(long)]
    pub glyph_size: Option<usize>,
    #[arg(long)]
    pub clutter: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Model and optimizer overrides shared by `train` and `compare`.
#[derive(Args)]
pub struct HyperArgs {
    #[arg(long)]
    pub snippet_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Probability of dropping a classifier input.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Hidden channels K.
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub stream: Option<Stream>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "fuse", conflicts_with = "fuse")]
    pub checkpoint: Option<PathBuf>,
    /// Product-fuse two checkpoints, usually rgb then flow.
    #[arg(long, num_args = 2, value_names = ["RGB", "FLOW"])]
    pub fuse: Option<Vec<PathBuf>>,
    #[arg(long, default_value_t = 25)]
    pub segments: usize,
    #[arg(long)]
    pub snippet_len: Option<usize>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Directory for report files; stdout only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Saliency threshold on the 0..255 scale.
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub span: Option<f64>,
    #[arg(long, overrides_with = "no_smooth")]
    pub smooth: bool,
    #[arg(long, overrides_with = "smooth")]
    pub no_smooth: bool,
    /// Write one PGM per frame and video.
    #[arg(long)]
    pub export_saliency: bool,
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<Variant>>,
    #[arg(long, value_delimiter = ',')]
    pub streams: Option<Vec<Stream>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub segments: Option<usize>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

/// Worker count from `VLSM_THREADS`, absent when unset.
fn workers_from_env() -> Result<Option<usize>, Error> {
    match std::env::var("VLSM_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("VLSM_THREADS must be a nonnegative integer, got {v:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("VLSM_THREADS: {e}"))),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let workers = workers_from_env()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(1))
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a, workers),
        Command::Eval(a) => commands::eval(a, workers),
        Command::Localize(a) => commands::localize(a),
        Command::ExportAttention(a) => commands::export_attention(a),
        Command::Compare(a) => commands::compare(a, workers),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
