//! `synthvol`: estimate intensity priors, generate samples, train, predict,
//! evaluate and benchmark.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "synthvol", version, about = "Synthetic MRI generation for joint super-resolution and contrast synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate GMM intensity priors from segmented scans of one channel.
    EstimateHyper(EstimateHyperArgs),
    /// Write generated training samples as NIfTI plus metadata.
    Generate(GenerateArgs),
    /// Train the U-net on the generator stream.
    Train(TrainArgs),
    /// Run a trained network on real scans.
    Predict(PredictArgs),
    /// Compare a prediction against a reference volume.
    Eval(EvalArgs),
    /// Time the hot paths.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct EstimateHyperArgs {
    /// `image.nii:labels.nii`, repeatable.
    #[arg(long = "scan", required = true)]
    pub scans: Vec<String>,
    /// Channel these scans belong to (1 = reference).
    #[arg(long, default_value_t = 1)]
    pub channel: usize,
    /// Acquisition resolution r_c in mm; defaults to each image's voxel size.
    #[arg(long, value_parser = config::parse_triple)]
    pub acq_res: Option<[f64; 3]>,
    #[arg(long, value_parser = config::parse_triple, default_value = "1,1,1")]
    pub target_res: [f64; 3],
    /// Spread widening factor; 1 disables widening.
    #[arg(long, default_value_t = synthvol_core::hyper::DEFAULT_WIDEN)]
    pub widen: f64,
    /// Restrict to these labels (comma separated); default: all observed.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<u32>>,
    #[arg(long, value_enum, default_value = "sum")]
    pub variance_ratio: config::RatioArg,
    /// Skip min-max normalization of each scan before estimation.
    #[arg(long)]
    pub raw_intensities: bool,
    /// Existing multi-channel prior file to merge this channel into.
    #[arg(long)]
    pub merge: Option<std::path::PathBuf>,
    /// Output JSON (stdout when absent).
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Run configuration JSON.
    #[arg(long)]
    pub config: std::path::PathBuf,
    #[arg(long)]
    pub count: u64,
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, env = "SYNTHVOL_SEED")]
    pub seed: Option<u64>,
    /// Generator workers; defaults to the config's `workers`.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Index of the first sample.
    #[arg(long, default_value_t = 0)]
    pub start: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: std::path::PathBuf,
    #[arg(long)]
    pub iters: u64,
    /// Output directory for checkpoints and the loss trace.
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Generator workers; defaults to the config's `workers`.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<std::path::PathBuf>,
    #[arg(long, env = "SYNTHVOL_SEED")]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    /// Channel volumes in channel order; the first defines the output frame.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<std::path::PathBuf>,
    /// `c:matrix.txt`: 4×4 row-major world transform mapping reference
    /// world coordinates to channel `c` world coordinates.
    #[arg(long = "transform")]
    pub transforms: Vec<String>,
    #[arg(long, value_parser = config::parse_triple, default_value = "1,1,1")]
    pub target_res: [f64; 3],
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// Also write `<out stem>_V<c>.nii` reliability maps.
    #[arg(long)]
    pub save_reliability: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: std::path::PathBuf,
    #[arg(long = "ref")]
    pub reference: std::path::PathBuf,
    /// Low-resolution input to score as a trilinear-upsampling baseline.
    #[arg(long)]
    pub baseline: Option<std::path::PathBuf>,
    /// PSNR peak range; defaults to the reference's intensity range.
    #[arg(long)]
    pub range: Option<f64>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_parser = config::parse_dims, default_value = "64,64,64")]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,4")]
    pub workers: Vec<usize>,
    /// CSV output (stdout when absent).
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::EstimateHyper(a) => commands::estimate_hyper(a),
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
