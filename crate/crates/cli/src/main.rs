//! `msf`: synthesize data, train, evaluate and render error maps.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msf_core::eval::Combiner;
use msf_core::losses::OccTiming;

#[derive(Parser)]
#[command(name = "msf", version, about = "Self-supervised multi-frame stereo scene flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes with ground truth.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a directory of stored predictions.
    Eval(EvalArgs),
    /// Render per-pixel error maps for stored predictions.
    Viz(VizArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of scenes; scene `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub boxes: Option<usize>,
    /// No ego or object motion.
    #[arg(long = "static")]
    pub still: bool,
}

#[derive(Args)]
pub struct RunOverrides {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub occ_timing: Option<OccTiming>,
    #[arg(long)]
    pub combiner: Option<Combiner>,
    /// Extra `key=value` settings applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunOverrides,
    /// Refinement iterations per forward pass.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue from `<out>/checkpoint.json` when it exists.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of stored predictions, `<scene>/{disp,disp2,flow}_XX.png`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Iteration counts to evaluate, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub iters: Vec<usize>,
    #[arg(long)]
    pub combiner: Option<Combiner>,
}

#[derive(Args)]
pub struct VizArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "and")]
    pub combiner: Combiner,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Viz(a) => commands::viz(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} msg={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
