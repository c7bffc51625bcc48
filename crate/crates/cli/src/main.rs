//! `panotrack` command-line front end.
//!
//! Exit codes: 0 success, 1 a check reported failure, 2 input error,
//! 3 configuration error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "panotrack", version, about = "Panoramic multi-object tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the tracker over a detection file.
    Track(TrackArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic sequence.
    Synth(SynthArgs),
    /// Run an ablation suite on the synthetic benchmark.
    Ablate(AblateArgs),
    /// Check the feedback entropy inequality on random joint tables.
    EntropyCheck(EntropyArgs),
}

#[derive(Args)]
pub struct TrackArgs {
    /// Detections in MOT format.
    #[arg(long, required_unless_present = "manifest")]
    pub dets: Option<PathBuf>,
    /// Embedding sidecar, one line per detection record.
    #[arg(long)]
    pub embeds: Option<PathBuf>,
    /// key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// e2e, tbd, ensemble or auto; overrides the config file.
    #[arg(long)]
    pub mode: Option<String>,
    /// Output directory for tracks.txt, frames.csv and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rerun with the config and inputs recorded in this manifest.
    #[arg(long, conflicts_with_all = ["dets", "embeds", "config"])]
    pub manifest: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Ground truth in MOT format; repeat for several sequences.
    #[arg(long, required = true)]
    pub gt: Vec<PathBuf>,
    /// Predictions, paired with `--gt` in order.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    /// Comma-separated subset of hota,deta,assa,mota,idf1,ospa.
    #[arg(long, default_value = "hota,deta,assa,mota,idf1,ospa")]
    pub metrics: String,
    /// CSV report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// IoU threshold for MOTA and IDF1.
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long, default_value_t = 1.0)]
    pub ospa_cutoff: f64,
    #[arg(long, default_value_t = 1.0)]
    pub ospa_order: f64,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory for gt.txt, dets.txt, embeds.txt and scenario.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 600)]
    pub frames: usize,
    #[arg(long, default_value_t = 12)]
    pub targets: usize,
    /// smooth, gait or pitch.
    #[arg(long, default_value = "gait")]
    pub regime: String,
    #[arg(long)]
    pub p_miss: Option<f64>,
    #[arg(long)]
    pub clutter_rate: Option<f64>,
    #[arg(long)]
    pub embed_noise: Option<f64>,
    /// Exact detections: no misses, clutter, jitter or embedding noise.
    #[arg(long)]
    pub noiseless: bool,
    /// One target circling the seam this many times instead.
    #[arg(long)]
    pub seam_turns: Option<f64>,
}

#[derive(Args)]
pub struct AblateArgs {
    /// components, flexitrack or thresholds.
    #[arg(long)]
    pub suite: String,
    /// Number of benchmark sequences [default: 20, or 4 for thresholds].
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long, default_value_t = 600)]
    pub frames: usize,
    /// Tracking mode for every row.
    #[arg(long, default_value = "e2e")]
    pub mode: String,
    /// Base config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EntropyArgs {
    /// Random joint tables to test.
    #[arg(long, default_value_t = 1000)]
    pub tables: usize,
    /// Side length of each table.
    #[arg(long, default_value_t = 4)]
    pub size: usize,
    /// Frames per feedback sequence.
    #[arg(long, default_value_t = 1)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also report on a joint table read from this CSV file.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Track(a) => commands::track(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::EntropyCheck(a) => commands::entropy_check(&a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("panotrack: {e}");
            ExitCode::from(if e.is_config() { 3 } else { 2 })
        }
    }
}
